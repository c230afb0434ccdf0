from __future__ import annotations

import math
import sys
import textwrap

import numpy as np
import pytest

from conftest import make_box, random_box
from cootest import perception
from cootest.errors import (
    DetectorExited,
    DetectorTimeout,
    HandshakeError,
    MalformedResponseError,
)
from cootest.geometry import bev_iou
from cootest.operators import TransformSpec, apply, apply_sm
from cootest.perception import DetectorConfig, detect_single, get_pred, nms, run_external
from cootest.rng import SplitMix64
from cootest.scene import Box3D, PointCloud
from cootest.synth import AgentInit, Vehicle, compose_scene

CFG = DetectorConfig(fusion="early")


def occlusion_scene(scene_id="occl", blocker_gap=10.0):
    """Ego stares at a blocker taller than its sensor; a lower vehicle
    hides directly behind it but is fully visible from a flanking
    connected vehicle."""
    vehicles = [
        Vehicle((10.0, 0.0), (4.4, 1.9, 1.8), 0.0),
        Vehicle((10.0 + blocker_gap, 0.0), (4.4, 1.9, 1.4), 0.0),
    ]
    agents = [
        AgentInit("ego", "ego", (0.0, 0.0), 0.0),
        AgentInit("cav-1", "cav", (20.0, -18.0), math.pi / 2),
    ]
    return compose_scene(scene_id, vehicles, agents, master_seed=77)


# ---------------------------------------------------------------------------
# single-cloud detection


def test_detect_single_empty():
    assert detect_single(PointCloud.empty(), CFG) == []


def test_detect_single_dense_cuboid():
    vehicle = Vehicle((10.0, 5.0), (4.5, 1.9, 1.5), 0.3)
    agents = [AgentInit("ego", "ego", (0.0, 0.0), 0.0)]
    scene = compose_scene("one", [vehicle], agents, points_per_m2=13.0, master_seed=5)
    cloud = scene.ego_track().frames[0].cloud
    assert 150 <= len(cloud) <= 260
    boxes = detect_single(cloud, CFG)
    assert len(boxes) == 1
    gt = scene.ground_truth[0]
    dist = math.hypot(
        boxes[0].center[0] - gt.center[0], boxes[0].center[1] - gt.center[1]
    )
    assert dist < 0.3


def test_detect_single_two_separated_cuboids():
    vehicles = [
        Vehicle((8.0, 0.0), (4.4, 1.9, 1.5), 0.0),
        Vehicle((8.0, 20.0), (4.4, 1.9, 1.5), 1.0),
    ]
    agents = [AgentInit("ego", "ego", (0.0, 10.0), 0.0)]
    scene = compose_scene("two", vehicles, agents, master_seed=6)
    boxes = detect_single(scene.ego_track().frames[0].cloud, CFG)
    assert len(boxes) == 2


def test_detect_single_sorted_by_confidence():
    scene = occlusion_scene()
    boxes = detect_single(scene.cav_tracks()[0].frames[0].cloud, CFG)
    confs = [b.confidence for b in boxes]
    assert confs == sorted(confs, reverse=True)


def test_ground_points_removed():
    ground = np.column_stack(
        [
            np.linspace(1, 20, 400),
            np.zeros(400),
            np.full(400, -1.6),
            np.full(400, 0.5),
        ]
    ).astype(np.float32)
    assert detect_single(PointCloud.from_array(ground), CFG) == []


# ---------------------------------------------------------------------------
# NMS


def test_nms_empty():
    assert nms([], 0.5) == []


def test_nms_keeps_max_confidence():
    a = make_box(conf=0.9)
    b = make_box(conf=0.8)
    kept = nms([b, a], 0.5)
    assert kept == [a]


def test_nms_matches_bruteforce_reference():
    def reference_nms(boxes, thr):
        order = sorted(
            boxes,
            key=lambda b: (-b.confidence, b.center[0], b.center[1], b.yaw),
        )
        kept = []
        for box in order:
            suppressed = False
            for other in kept:
                if bev_iou(box, other) > thr:
                    suppressed = True
                    break
            if not suppressed:
                kept.append(box)
        return kept

    stream = SplitMix64(77)
    for _ in range(50):
        boxes = [random_box(stream, span=3.0) for _ in range(10)]
        assert nms(boxes, 0.3) == reference_nms(boxes, 0.3)


def test_nms_idempotent():
    stream = SplitMix64(78)
    for _ in range(30):
        boxes = [random_box(stream, span=3.0) for _ in range(12)]
        once = nms(boxes, 0.15)
        assert nms(once, 0.15) == once


# ---------------------------------------------------------------------------
# fusion


def test_early_fusion_single_agent_equals_ego_only():
    vehicles = [Vehicle((9.0, 2.0), (4.4, 1.9, 1.5), 0.5)]
    agents = [AgentInit("ego", "ego", (0.0, 0.0), 0.2)]
    scene = compose_scene("solo", vehicles, agents, master_seed=8)
    ego_result = perception.detect_ego_only(scene, CFG)
    fused = perception.fuse_early(scene, CFG)
    assert fused.boxes == ego_result.boxes
    assert fused.source == "cooperative"
    assert ego_result.source == "ego_only"


def test_late_fusion_single_agent_equals_ego_only():
    vehicles = [Vehicle((9.0, 2.0), (4.4, 1.9, 1.5), 0.5)]
    agents = [AgentInit("ego", "ego", (0.0, 0.0), 0.2)]
    scene = compose_scene("solo", vehicles, agents, master_seed=8)
    cfg = DetectorConfig(fusion="late")
    assert perception.fuse_late(scene, cfg).boxes == perception.detect_ego_only(scene, cfg).boxes


def test_occluded_object_appears_only_with_cooperation():
    scene = occlusion_scene()
    hidden_gt = scene.ground_truth[1]
    ego_result, cp_result = get_pred(CFG, scene)

    def hits(boxes):
        return any(bev_iou(b, hidden_gt) >= 0.5 for b in boxes)

    assert not hits(ego_result.boxes)
    assert hits(cp_result.boxes)


def test_late_fusion_merges_duplicate_detections():
    vehicles = [Vehicle((8.0, 0.0), (4.4, 1.9, 1.5), 0.0)]
    agents = [
        AgentInit("ego", "ego", (0.0, 0.0), 0.0),
        AgentInit("cav-1", "cav", (16.0, 2.0), math.pi),
    ]
    scene = compose_scene("dup", vehicles, agents, master_seed=9)
    cfg = DetectorConfig(fusion="late")
    result = perception.fuse_late(scene, cfg)
    overlapping = [b for b in result.boxes if bev_iou(b, scene.ground_truth[0]) > 0.3]
    assert len(overlapping) == 1


def test_sm_shifts_cav_only_detection_by_translation():
    scene = occlusion_scene()
    hidden_gt = scene.ground_truth[1]

    def fused_box_near_hidden(s):
        _, cp = get_pred(CFG, s)
        cands = [b for b in cp.boxes if bev_iou(b, hidden_gt) > 0.2]
        assert cands
        return max(cands, key=lambda b: bev_iou(b, hidden_gt))

    before = fused_box_near_hidden(scene)
    after = fused_box_near_hidden(apply_sm(scene, 0.2, 0.0, 0.0, 0.0))
    shift = (after.center[0] - before.center[0], after.center[1] - before.center[1])
    assert abs(shift[0] - 0.2) < 0.05 and abs(shift[1]) < 0.05


def test_get_pred_ego_isolated_from_cav_corruption():
    scene = occlusion_scene()
    corrupted = apply(TransformSpec.create("GL", {"p_g": 1.0}, 4), scene)
    ego_clean, cp_clean = get_pred(CFG, scene)
    ego_corrupt, cp_corrupt = get_pred(CFG, corrupted)
    assert ego_corrupt.boxes == ego_clean.boxes
    assert cp_corrupt.boxes != cp_clean.boxes


def test_get_pred_score_floor():
    scene = occlusion_scene()
    ego_result, cp_result = get_pred(CFG, scene)
    for result in (ego_result, cp_result):
        assert all(b.confidence >= CFG.score_floor for b in result.boxes)


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(cluster_radius=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(min_points=2)
    with pytest.raises(ValueError):
        DetectorConfig(nms_iou=1.0)
    with pytest.raises(ValueError):
        DetectorConfig(fusion="external")


# ---------------------------------------------------------------------------
# external detector protocol


def _write_adapter(tmp_path, body: str) -> str:
    script = tmp_path / "adapter.py"
    script.write_text(textwrap.dedent(body))
    return f"{sys.executable} {script}"


ECHO_ADAPTER = """
    import json, sys
    sys.stdin.readline()
    print(json.dumps({"ok": True, "detector_id": "echo-fixture"}), flush=True)
    for line in sys.stdin:
        print(json.dumps({"boxes": [
            {"center": [1.0, 2.0, 0.0], "dims": [4.0, 2.0, 1.5],
             "yaw": 0.25, "score": 0.9}
        ]}), flush=True)
"""


def test_run_external_echo_loopback(tmp_path):
    scene = occlusion_scene()
    cmd = _write_adapter(tmp_path, ECHO_ADAPTER)
    result = run_external(cmd, scene)
    assert result.detector_id == "echo-fixture"
    assert result.boxes == (
        Box3D.create((1.0, 2.0, 0.0), (4.0, 2.0, 1.5), 0.25, 0.9),
    )


def test_run_external_invalid_json_names_line(tmp_path):
    cmd = _write_adapter(
        tmp_path,
        """
        import json, sys
        sys.stdin.readline()
        print(json.dumps({"ok": True, "detector_id": "bad"}), flush=True)
        sys.stdin.readline()
        print("this is not json", flush=True)
        """,
    )
    with pytest.raises(MalformedResponseError, match="line 2"):
        run_external(cmd, occlusion_scene())


def test_run_external_timeout_reaps_process(tmp_path):
    cmd = _write_adapter(
        tmp_path,
        """
        import json, sys, time
        sys.stdin.readline()
        print(json.dumps({"ok": True, "detector_id": "sleepy"}), flush=True)
        sys.stdin.readline()
        time.sleep(60)
        """,
    )
    with pytest.raises(DetectorTimeout):
        run_external(cmd, occlusion_scene(), timeout=1.0)


def test_run_external_nonzero_exit(tmp_path):
    cmd = _write_adapter(
        tmp_path,
        """
        import json, sys
        sys.stdin.readline()
        print(json.dumps({"ok": True, "detector_id": "quitter"}), flush=True)
        sys.stdin.readline()
        sys.exit(3)
        """,
    )
    with pytest.raises(DetectorExited, match="code 3"):
        run_external(cmd, occlusion_scene())


def test_run_external_handshake_rejection(tmp_path):
    cmd = _write_adapter(
        tmp_path,
        """
        import json, sys
        sys.stdin.readline()
        print(json.dumps({"ok": False, "error": "unsupported protocol"}), flush=True)
        """,
    )
    with pytest.raises(HandshakeError):
        run_external(cmd, occlusion_scene())


def test_external_get_pred_uses_ego_only_scene(tmp_path):
    cmd = _write_adapter(
        tmp_path,
        """
        import json, sys
        sys.stdin.readline()
        print(json.dumps({"ok": True, "detector_id": "counter"}), flush=True)
        for line in sys.stdin:
            req = json.loads(line)
            n = len(req["scene"]["agents"])
            print(json.dumps({"boxes": [
                {"center": [float(n), 0.0, 0.0], "dims": [1.0, 1.0, 1.0],
                 "yaw": 0.0, "score": 0.9}
            ]}), flush=True)
        """,
    )
    cfg = DetectorConfig(fusion="external", external_cmd=cmd, score_floor=0.0)
    ego_result, cp_result = get_pred(cfg, occlusion_scene())
    assert ego_result.boxes[0].center[0] == 1.0  # saw only the ego agent
    assert cp_result.boxes[0].center[0] == 2.0  # saw the full scene

"""Detector abstraction: ego-only and cooperative perception.

Built-in reference detectors are geometric (ground removal, single-linkage
Euclidean clustering, principal-axis box fit) with early or late fusion.
Real models plug in through a line-delimited JSON protocol over a child
process's standard streams.

Lossy-communication specs recorded in a scene's provenance are honored
here, at transmission time: early fusion corrupts the connected vehicles'
point payloads, late fusion corrupts their detection payloads, and
external detectors receive the spec verbatim to apply to their own
internal features.  The ego agent's own observation is never corrupted.
"""

from __future__ import annotations

import base64
import json
import shlex
import subprocess
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import (
    DetectorExited,
    DetectorTimeout,
    HandshakeError,
    MalformedResponseError,
)
from .geometry import bev_iou, compose, invert, normalize_yaw, transform_box
from .operators import (
    BOX_CHANNELS,
    KIND_CL,
    KIND_GL,
    SharedPayload,
    TransformSpec,
    apply_lossy_channel,
    apply_lossy_global,
    payload_from_points,
    pending_lossy_specs,
    points_from_payload,
)
from .rng import SplitMix64, derive_seed
from .scene import AgentTrack, Box3D, PointCloud, Scene, evaluation_frame

PROTOCOL_VERSION = 1

SOURCE_EGO = "ego_only"
SOURCE_COOPERATIVE = "cooperative"

FUSION_EARLY = "early"
FUSION_LATE = "late"
FUSION_EXTERNAL = "external"

_POINTS_PER_FULL_CONFIDENCE = 50.0
_MIN_BOX_DIM = 0.05


@dataclass(frozen=True)
class DetectorConfig:
    fusion: str = FUSION_EARLY
    cluster_radius: float = 0.7  # meters, single-linkage distance
    min_points: int = 5
    nms_iou: float = 0.15
    score_floor: float = 0.2
    ground_z: float = -1.4  # points below this (sensor frame) are ground
    external_cmd: Optional[str] = None
    external_timeout: float = 30.0

    def __post_init__(self):
        if self.cluster_radius <= 0:
            raise ValueError("cluster_radius must be > 0")
        if self.min_points < 3:
            raise ValueError("min_points must be >= 3")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        if self.fusion == FUSION_EXTERNAL and not self.external_cmd:
            raise ValueError("external fusion requires external_cmd")

    def detector_id(self) -> str:
        if self.fusion == FUSION_EXTERNAL:
            return f"external:{self.external_cmd}"
        return f"reference-{self.fusion}"


@dataclass(frozen=True)
class DetectionResult:
    boxes: tuple[Box3D, ...]
    source: str
    detector_id: str

    def filtered(self, score_floor: float) -> "DetectionResult":
        kept = tuple(b for b in self.boxes if b.confidence >= score_floor)
        return DetectionResult(kept, self.source, self.detector_id)


# ---------------------------------------------------------------------------
# reference detector


def _cluster_labels(xyz: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage Euclidean clusters: connected components of the
    radius graph."""
    n = xyz.shape[0]
    if n == 0:
        return np.empty(0, dtype=int)
    pairs = cKDTree(xyz).query_pairs(r=radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    ones = np.ones(len(pairs), dtype=np.int8)
    graph = coo_matrix((ones, (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def _fit_box(points: np.ndarray) -> Box3D:
    """Yaw-aligned box around a cluster via a planar principal-axis fit."""
    xy = points[:, :2].astype(np.float64)
    mean = xy.mean(axis=0)
    d = xy - mean
    cxx = float(np.mean(d[:, 0] * d[:, 0]))
    cyy = float(np.mean(d[:, 1] * d[:, 1]))
    cxy = float(np.mean(d[:, 0] * d[:, 1]))
    yaw = 0.5 * np.arctan2(2.0 * cxy, cxx - cyy)
    cos, sin = np.cos(yaw), np.sin(yaw)
    u = d[:, 0] * cos + d[:, 1] * sin
    v = -d[:, 0] * sin + d[:, 1] * cos
    z = points[:, 2].astype(np.float64)
    length = max(float(u.max() - u.min()), _MIN_BOX_DIM)
    width = max(float(v.max() - v.min()), _MIN_BOX_DIM)
    height = max(float(z.max() - z.min()), _MIN_BOX_DIM)
    mid_u = (float(u.max()) + float(u.min())) / 2.0
    mid_v = (float(v.max()) + float(v.min())) / 2.0
    center_x = mean[0] + mid_u * cos - mid_v * sin
    center_y = mean[1] + mid_u * sin + mid_v * cos
    center_z = (float(z.max()) + float(z.min())) / 2.0
    confidence = min(1.0, points.shape[0] / _POINTS_PER_FULL_CONFIDENCE)
    return Box3D.create(
        (center_x, center_y, center_z),
        (length, width, height),
        normalize_yaw(float(yaw)),
        confidence,
    )


def detect_single(cloud: PointCloud, cfg: DetectorConfig) -> list[Box3D]:
    """Detect boxes in one cloud, sensor frame, sorted by confidence."""
    pts = cloud.points
    if len(pts) == 0:
        return []
    above_ground = pts[pts[:, 2] >= cfg.ground_z]
    if above_ground.shape[0] == 0:
        return []
    labels = _cluster_labels(
        above_ground[:, :3].astype(np.float64), cfg.cluster_radius
    )
    boxes = []
    for label in np.unique(labels):
        members = above_ground[labels == label]
        if members.shape[0] >= cfg.min_points:
            boxes.append(_fit_box(members))
    boxes.sort(key=_box_order_key)
    return boxes


def _box_order_key(box: Box3D):
    return (-box.confidence, box.center[0], box.center[1], box.yaw)


def nms(boxes: Sequence[Box3D], iou_threshold: float) -> list[Box3D]:
    """Greedy suppression by descending confidence.

    A box is dropped iff its footprint IoU with an already-kept box
    exceeds the threshold; confidence ties break on (x, y, yaw).
    """
    ordered = sorted(boxes, key=_box_order_key)
    kept: list[Box3D] = []
    for box in ordered:
        if all(bev_iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


# ---------------------------------------------------------------------------
# payload corruption at transmission time


def _lossy_stream(scene: Scene, spec: TransformSpec, agent_id: str) -> SplitMix64:
    return SplitMix64(derive_seed(spec.seed, scene.scene_id, spec.kind, agent_id))


def _corrupt_payload(
    payload: SharedPayload, scene: Scene, agent_id: str
) -> SharedPayload:
    for spec in pending_lossy_specs(scene):
        stream = _lossy_stream(scene, spec, agent_id)
        if spec.kind == KIND_GL:
            payload = apply_lossy_global(payload, spec.param("p_g"), stream)
        elif spec.kind == KIND_CL:
            payload = apply_lossy_channel(payload, spec.param("p_c"), stream)
    return payload


def _transmitted_points(scene: Scene, track: AgentTrack) -> np.ndarray:
    """The point payload a connected vehicle puts on the air."""
    frame = evaluation_frame(track, scene.eval_timestamp)
    pts = frame.cloud.points
    if len(pts) == 0:
        return pts
    payload = _corrupt_payload(payload_from_points(pts), scene, track.agent_id)
    return points_from_payload(payload)


def _boxes_to_payload(boxes: Sequence[Box3D]) -> SharedPayload:
    rows = np.array(
        [[*b.center, *b.dims, b.yaw, b.confidence] for b in boxes], dtype=np.float64
    ).reshape(len(boxes), len(BOX_CHANNELS))
    return SharedPayload.create(BOX_CHANNELS, rows.T)


def _boxes_from_payload(payload: SharedPayload) -> list[Box3D]:
    # Receiver-side sanitization: noisy fields are clamped back into the
    # box invariants instead of crashing the pipeline.
    out = []
    for row in payload.values.T:
        cx, cy, cz, l, w, h, yaw, score = (float(v) for v in row)
        out.append(
            Box3D.create(
                (cx, cy, cz),
                (max(l, _MIN_BOX_DIM), max(w, _MIN_BOX_DIM), max(h, _MIN_BOX_DIM)),
                normalize_yaw(yaw),
                min(1.0, max(0.0, score)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# fusion


def _ego_frame(scene: Scene):
    return evaluation_frame(scene.ego_track(), scene.eval_timestamp)


def fuse_early(scene: Scene, cfg: DetectorConfig) -> DetectionResult:
    """Raw point sharing: project every agent's cloud into the ego frame
    and detect on the union."""
    ego_frame = _ego_frame(scene)
    world_from_ego = ego_frame.pose
    ego_from_world = invert(world_from_ego)
    clouds = [ego_frame.cloud.points]
    for track in scene.cav_tracks():
        frame = evaluation_frame(track, scene.eval_timestamp)
        pts = _transmitted_points(scene, track)
        if pts.shape[0] == 0:
            continue
        ego_from_cav = compose(ego_from_world, frame.pose)
        rot = ego_from_cav.matrix[:3, :3]
        t = ego_from_cav.matrix[:3, 3]
        moved = pts.astype(np.float64)
        moved[:, :3] = moved[:, :3] @ rot.T + t
        clouds.append(moved.astype(np.float32))
    union = PointCloud.from_array(np.concatenate(clouds, axis=0))
    boxes = nms(detect_single(union, cfg), cfg.nms_iou)
    return DetectionResult(tuple(boxes), SOURCE_COOPERATIVE, cfg.detector_id())


def fuse_late(scene: Scene, cfg: DetectorConfig) -> DetectionResult:
    """Detection sharing: per-agent detection, projection into the ego
    frame, then non-maximum suppression over the union."""
    ego_frame = _ego_frame(scene)
    ego_from_world = invert(ego_frame.pose)
    merged: list[Box3D] = list(detect_single(ego_frame.cloud, cfg))
    for track in scene.cav_tracks():
        frame = evaluation_frame(track, scene.eval_timestamp)
        local = detect_single(frame.cloud, cfg)
        if local:
            payload = _corrupt_payload(
                _boxes_to_payload(local), scene, track.agent_id
            )
            local = _boxes_from_payload(payload)
        ego_from_cav = compose(ego_from_world, frame.pose)
        merged.extend(transform_box(b, ego_from_cav) for b in local)
    boxes = nms(merged, cfg.nms_iou)
    return DetectionResult(tuple(boxes), SOURCE_COOPERATIVE, cfg.detector_id())


def detect_ego_only(scene: Scene, cfg: DetectorConfig) -> DetectionResult:
    frame = _ego_frame(scene)
    boxes = nms(detect_single(frame.cloud, cfg), cfg.nms_iou)
    return DetectionResult(tuple(boxes), SOURCE_EGO, cfg.detector_id())


def get_pred(
    cfg: DetectorConfig, scene: Scene
) -> tuple[DetectionResult, DetectionResult]:
    """(ego-only result, cooperative result), both in the ego frame and
    filtered at the score floor."""
    if cfg.fusion == FUSION_EXTERNAL:
        ego_result, cp_result = _external_get_pred(cfg, scene)
    else:
        ego_result = detect_ego_only(scene, cfg)
        if cfg.fusion == FUSION_EARLY:
            cp_result = fuse_early(scene, cfg)
        elif cfg.fusion == FUSION_LATE:
            cp_result = fuse_late(scene, cfg)
        else:
            raise ValueError(f"unknown fusion mode {cfg.fusion!r}")
    return ego_result.filtered(cfg.score_floor), cp_result.filtered(cfg.score_floor)


# ---------------------------------------------------------------------------
# external detector protocol


def scene_to_wire(scene: Scene) -> dict:
    """Scene encoding for the detector protocol: inline base64 clouds."""
    agents = []
    for track in scene.agents:
        frames = []
        for frame in track.frames:
            raw = np.ascontiguousarray(frame.cloud.points, dtype="<f4").tobytes()
            frames.append(
                {
                    "timestamp": frame.timestamp,
                    "pose": [float(v) for v in frame.pose.matrix.reshape(16)],
                    "cloud_b64": base64.b64encode(raw).decode("ascii"),
                }
            )
        agents.append(
            {"agent_id": track.agent_id, "role": track.role, "frames": frames}
        )
    return {
        "scene_id": scene.scene_id,
        "eval_timestamp": scene.eval_timestamp,
        "agents": agents,
    }


class ExternalDetector:
    """One child process speaking the line-delimited detector protocol."""

    def __init__(self, cmd: str, timeout: float = 30.0):
        self._cmd = cmd
        self._timeout = timeout
        self._lines_read = 0
        self._proc = subprocess.Popen(
            shlex.split(cmd),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
        )
        self.detector_id = self._handshake()

    def _send(self, obj) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(obj) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            code = self._proc.poll()
            raise DetectorExited(
                f"detector exited (code {code}) before accepting a request"
            ) from exc

    def _read_line(self) -> str:
        assert self._proc.stdout is not None
        timed_out = threading.Event()

        def _kill_on_timeout():
            timed_out.set()
            self._proc.kill()

        timer = threading.Timer(self._timeout, _kill_on_timeout)
        timer.start()
        try:
            line = self._proc.stdout.readline()
        finally:
            timer.cancel()
        if line == "":
            self._proc.wait()
            if timed_out.is_set():
                raise DetectorTimeout(
                    f"no response within {self._timeout}s; process killed"
                )
            raise DetectorExited(
                f"detector exited with code {self._proc.returncode} mid-request"
            )
        self._lines_read += 1
        return line

    def _read_json(self) -> dict:
        line = self._read_line()
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(str(exc), self._lines_read) from exc
        if not isinstance(obj, dict):
            raise MalformedResponseError("response is not an object", self._lines_read)
        return obj

    def _handshake(self) -> str:
        self._send({"cootest_protocol": PROTOCOL_VERSION})
        reply = self._read_json()
        if reply.get("ok") is not True or "detector_id" not in reply:
            raise HandshakeError(f"handshake rejected: {reply}")
        return str(reply["detector_id"])

    def detect(
        self, scene: Scene, forwarded_spec: Optional[TransformSpec] = None
    ) -> DetectionResult:
        request = {
            "scene": scene_to_wire(scene),
            "forwarded_spec": forwarded_spec.to_json_obj() if forwarded_spec else None,
        }
        self._send(request)
        reply = self._read_json()
        if "error" in reply:
            raise MalformedResponseError(
                f"detector error: {reply['error']}", self._lines_read
            )
        if "boxes" not in reply or not isinstance(reply["boxes"], list):
            raise MalformedResponseError("missing 'boxes' list", self._lines_read)
        try:
            boxes = tuple(
                Box3D.create(b["center"], b["dims"], b["yaw"], b["score"])
                for b in reply["boxes"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(f"bad box record: {exc}", self._lines_read)
        return DetectionResult(boxes, SOURCE_COOPERATIVE, self.detector_id)

    def close(self) -> None:
        if self._proc.poll() is None:
            if self._proc.stdin is not None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> "ExternalDetector":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def run_external(
    cmd: str,
    scene: Scene,
    forwarded_spec: Optional[TransformSpec] = None,
    timeout: float = 30.0,
) -> DetectionResult:
    """One-shot request against a freshly launched external detector."""
    with ExternalDetector(cmd, timeout=timeout) as det:
        return det.detect(scene, forwarded_spec)


def _ego_only_scene(scene: Scene) -> Scene:
    from dataclasses import replace

    return replace(scene, agents=(scene.ego_track(),), provenance=())


def _external_get_pred(
    cfg: DetectorConfig, scene: Scene
) -> tuple[DetectionResult, DetectionResult]:
    pending = pending_lossy_specs(scene)
    forwarded = pending[-1] if pending else None
    with ExternalDetector(cfg.external_cmd, timeout=cfg.external_timeout) as det:
        cp = det.detect(scene, forwarded)
        ego = det.detect(_ego_only_scene(scene), None)
    ego = DetectionResult(ego.boxes, SOURCE_EGO, det.detector_id)
    return ego, cp

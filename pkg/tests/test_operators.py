from __future__ import annotations

import math

import numpy as np
import pytest

from cootest import operators as ops
from cootest.errors import TransformError
from cootest.rng import SplitMix64, derive_seed
from cootest.scene import scenes_equal
from cootest.synth import SynthConfig, generate_scene, generate_sequence


def seq_scene(seed=3, frames=4):
    cfg = SynthConfig(
        n_vehicles=5, area=30.0, n_cavs=1, frames=frames, frame_dt=100, master_seed=seed
    )
    return generate_sequence(cfg)


# ---------------------------------------------------------------------------
# parameter sampling


def test_sample_params_within_ranges_all_kinds():
    for kind in ops.ALL_KINDS:
        for seed in range(200):
            spec = ops.sample_params(kind, seed)
            for name, value in spec.params:
                lo, hi = ops.PARAM_RANGES[kind][name]
                assert lo <= value <= hi, (kind, name, value)


def test_sample_params_fog_seed_7():
    spec = ops.sample_params("FG", 7)
    assert 200.0 < spec.param("f_g") < 1000.0


def test_sample_params_sm_has_four_components():
    spec = ops.sample_params("SM", 11)
    assert sorted(spec.params_dict()) == ["r_z", "t_x", "t_y", "t_z"]


def test_sample_params_deterministic():
    assert ops.sample_params("RN", 99) == ops.sample_params("RN", 99)


def test_sample_params_unknown_kind():
    with pytest.raises(TransformError, match="unknown operator"):
        ops.sample_params("XX", 0)


# ---------------------------------------------------------------------------
# communication latency


def test_ct_zero_is_identity_modulo_provenance():
    scene = seq_scene()
    out = ops.apply_ct(scene, 0.0)
    assert scenes_equal(scene, out, ignore_provenance=True)
    assert out.provenance[-1].kind == "CT"


def test_ct_selects_latest_frame_before_cutoff():
    from cootest.scene import evaluation_frame

    scene = seq_scene(frames=3)  # frames at 0, 100, 200; eval at 200
    out = ops.apply_ct(scene, 150.0)
    for track in out.cav_tracks():
        assert evaluation_frame(track, out.eval_timestamp).timestamp == 0
    ego_in = scene.ego_track()
    ego_out = out.ego_track()
    assert ego_in.frames == ego_out.frames  # ego untouched


def test_ct_insufficient_history_names_agent():
    scene = generate_scene(SynthConfig(n_vehicles=3, area=25.0, master_seed=5))
    with pytest.raises(TransformError, match="cav-1"):
        ops.apply_ct(scene, 300.0)


# ---------------------------------------------------------------------------
# spatial misalignment


def test_sm_zeros_identity_modulo_provenance():
    scene = seq_scene()
    out = ops.apply_sm(scene, 0.0, 0.0, 0.0, 0.0)
    assert scenes_equal(scene, out, ignore_provenance=True)


def test_sm_pure_translation_shifts_cav_pose():
    scene = seq_scene()
    out = ops.apply_sm(scene, 0.2, 0.0, 0.0, 0.0)
    for before, after in zip(scene.cav_tracks(), out.cav_tracks()):
        for f_before, f_after in zip(before.frames, after.frames):
            delta = f_after.pose.matrix[:3, 3] - f_before.pose.matrix[:3, 3]
            np.testing.assert_allclose(delta, [0.2, 0.0, 0.0], atol=1e-12)
            assert f_after.cloud == f_before.cloud  # local cloud untouched
    ego_before, ego_after = scene.ego_track(), out.ego_track()
    assert ego_before.frames == ego_after.frames


def test_sm_rotation_premultiplies_cav_rotation():
    scene = seq_scene()
    out = ops.apply_sm(scene, 0.0, 0.0, 0.0, 2.0)
    r = math.radians(2.0)
    rz = np.array(
        [[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]]
    )
    before = scene.cav_tracks()[0].frames[0].pose.matrix[:3, :3]
    after = out.cav_tracks()[0].frames[0].pose.matrix[:3, :3]
    np.testing.assert_allclose(after, rz @ before, atol=1e-6)


# ---------------------------------------------------------------------------
# lossy payloads


def _payload(n=1000, channels=4, seed=1):
    stream = SplitMix64(seed)
    values = stream.uniform(-5.0, 5.0, channels * n).reshape(channels, n)
    names = tuple(f"ch{i}" for i in range(channels))
    return ops.SharedPayload.create(names, values)


def test_lossy_global_zero_identity():
    payload = _payload()
    out = ops.apply_lossy_global(payload, 0.0, SplitMix64(2))
    assert np.array_equal(out.values, payload.values)


def test_lossy_global_full_replacement_within_range():
    payload = _payload()
    out = ops.apply_lossy_global(payload, 1.0, SplitMix64(2))
    lo, hi = payload.values.min(), payload.values.max()
    assert out.values.min() >= lo and out.values.max() <= hi
    assert not np.array_equal(out.values, payload.values)


def test_lossy_global_replacement_fraction():
    payload = _payload(n=25_000, channels=4)  # 1e5 scalars
    out = ops.apply_lossy_global(payload, 0.5, SplitMix64(3))
    changed = np.mean(out.values != payload.values)
    assert abs(changed - 0.5) <= 0.01


def test_lossy_channel_floor_semantics():
    payload = _payload(channels=4)
    out = ops.apply_lossy_channel(payload, 0.5, SplitMix64(4))
    changed_channels = [
        i for i in range(4) if not np.array_equal(out.values[i], payload.values[i])
    ]
    assert len(changed_channels) == 2
    for i in changed_channels:
        lo, hi = payload.values[i].min(), payload.values[i].max()
        assert out.values[i].min() >= lo and out.values[i].max() <= hi

    assert np.array_equal(
        ops.apply_lossy_channel(payload, 0.0, SplitMix64(5)).values, payload.values
    )
    # floor(0.2 * 4) = 0 channels
    assert np.array_equal(
        ops.apply_lossy_channel(payload, 0.2, SplitMix64(6)).values, payload.values
    )


def test_lossy_scene_application_is_deferred():
    scene = seq_scene()
    spec = ops.TransformSpec.create("GL", {"p_g": 0.7}, 9)
    out = ops.apply(spec, scene)
    assert scenes_equal(scene, out, ignore_provenance=True)
    assert ops.pending_lossy_specs(out) == (spec,)


# ---------------------------------------------------------------------------
# weather


def test_attenuate_alpha_zero_is_identity():
    pts = np.array([[10, 0, 0, 0.5], [0, 20, 1, 0.8]], dtype=np.float32)
    out = ops.attenuate_cloud(pts, 0.0, SplitMix64(1))
    assert np.array_equal(out, pts)


def test_weather_visibility_ordering():
    scene = seq_scene(seed=8)
    heavy = ops.apply_weather(scene, "FG", 200.0, seed=77)
    light = ops.apply_weather(scene, "FG", 1000.0, seed=77)
    for h_track, l_track in zip(heavy.agents, light.agents):
        for h_frame, l_frame in zip(h_track.frames, l_track.frames):
            assert len(h_frame.cloud) <= len(l_frame.cloud)


def test_weather_deterministic():
    scene = seq_scene(seed=8)
    a = ops.apply_weather(scene, "RN", 5.0, seed=3)
    b = ops.apply_weather(scene, "RN", 5.0, seed=3)
    assert scenes_equal(a, b)


def test_weather_survivors_monotone_in_alpha():
    stream = SplitMix64(12)
    pts = np.column_stack(
        [
            stream.uniform(-80, 80, 3000),
            stream.uniform(-80, 80, 3000),
            stream.uniform(-2, 2, 3000),
            stream.uniform(0.0, 1.0, 3000),
        ]
    ).astype(np.float32)
    counts = [
        ops.attenuate_cloud(pts, alpha, SplitMix64(99)).shape[0]
        for alpha in (0.001, 0.004, 0.01, 0.02, 0.05)
    ]
    assert counts == sorted(counts, reverse=True)


def test_weather_out_of_range_intensity():
    scene = seq_scene()
    with pytest.raises(TransformError, match="outside"):
        ops.apply_weather(scene, "FG", 50.0, seed=1)


def test_weather_same_environment_for_every_agent():
    # two agents carrying identical local clouds: the deterministic dropout
    # rule depends only on the shared extinction coefficient, so survivor
    # counts must agree even though scatter draws differ per agent
    from cootest.geometry import make_pose
    from cootest.scene import AgentTrack, Frame, PointCloud, Scene

    stream = SplitMix64(90)
    pts = np.column_stack(
        [
            stream.uniform(-60, 60, 800),
            stream.uniform(-60, 60, 800),
            stream.uniform(-1, 1, 800),
            stream.uniform(0.0, 1.0, 800),
        ]
    ).astype(np.float32)
    cloud = PointCloud.from_array(pts)
    scene = Scene(
        "homog",
        0,
        (
            AgentTrack("ego", "ego", (Frame(0, make_pose(), cloud),)),
            AgentTrack("cav-1", "cav", (Frame(0, make_pose(x=5.0), cloud),)),
        ),
        (),
    )
    out = ops.apply_weather(scene, "FG", 300.0, seed=4)
    counts = [len(t.frames[0].cloud) for t in out.agents]
    assert counts[0] == counts[1] < 800


def test_scattered_points_stay_on_their_beam():
    pts = np.array([[30.0, 40.0, -1.0, 0.9]], dtype=np.float32)  # range 50.01
    out = ops.attenuate_cloud(pts, 0.02, SplitMix64(4))
    if out.shape[0]:  # survived the floor
        r_in = np.linalg.norm(pts[0, :3])
        r_out = np.linalg.norm(out[0, :3])
        direction_in = pts[0, :3] / r_in
        direction_out = out[0, :3] / r_out
        np.testing.assert_allclose(direction_in, direction_out, atol=1e-5)
        assert ops.MIN_SCATTER_RANGE - 1e-6 <= r_out <= r_in + 1e-4


# ---------------------------------------------------------------------------
# dispatch-level properties


def test_apply_preserves_ground_truth_all_kinds():
    for seed in range(20):
        scene = seq_scene(seed=seed)
        for kind in ops.ALL_KINDS:
            spec = ops.sample_params(kind, derive_seed(1234, seed, kind))
            out = ops.apply(spec, scene)
            assert out.ground_truth == scene.ground_truth
            assert out.provenance[-1] == spec


def test_apply_identity_parameters_modulo_provenance():
    scene = seq_scene()
    identity_specs = [
        ops.TransformSpec.create("CT", {"c_t": 0.0}, 0),
        ops.TransformSpec.create("SM", {"t_x": 0, "t_y": 0, "t_z": 0, "r_z": 0}, 0),
        ops.TransformSpec.create("GL", {"p_g": 0.0}, 0),
        ops.TransformSpec.create("CL", {"p_c": 0.2}, 0),  # floor(0.8) = 0 channels
    ]
    for spec in identity_specs:
        out = ops.apply(spec, scene)
        assert scenes_equal(scene, out, ignore_provenance=True), spec.kind


def test_apply_deterministic():
    scene = seq_scene(seed=21)
    spec = ops.sample_params("SW", 5)
    assert scenes_equal(ops.apply(spec, scene), ops.apply(spec, scene))


def test_spec_json_roundtrip():
    spec = ops.sample_params("SM", 17)
    assert ops.TransformSpec.from_json_obj(spec.to_json_obj()) == spec


# ---------------------------------------------------------------------------
# RNG


def test_splitmix_deterministic_and_uniform():
    a = SplitMix64(7).random(10_000)
    b = SplitMix64(7).random(10_000)
    assert np.array_equal(a, b)
    assert 0.0 <= a.min() and a.max() < 1.0
    assert abs(a.mean() - 0.5) < 0.02


def test_splitmix_scalar_matches_block():
    s1, s2 = SplitMix64(9), SplitMix64(9)
    scalars = [s1.random() for _ in range(5)]
    block = s2.random(5)
    np.testing.assert_allclose(scalars, block, atol=0)


def test_derive_seed_token_sensitivity():
    base = derive_seed(1, "a", 2)
    assert base != derive_seed(1, "a", 3)
    assert base != derive_seed(1, "b", 2)
    assert base != derive_seed(2, "a", 2)
    assert base == derive_seed(1, "a", 2)


def test_choice_without_replacement_uniformity():
    counts = np.zeros(5)
    stream = SplitMix64(31)
    for _ in range(2000):
        picked = stream.choice_without_replacement(5, 2)
        assert len(set(picked.tolist())) == 2
        counts[picked] += 1
    assert counts.min() > 0.8 * counts.max()

"""The seven scene transformation operators and their parameter sampling.

Communication operators: CT (latency, replays stale connected-vehicle
frames), SM (pose misalignment), GL/CL (lossy transmission of the shared
payload).  Weather operators: RN, SW, FG (range-dependent attenuation,
dropout, and backscatter applied identically to every agent).

Every operator preserves the ground truth exactly and appends its spec to
the scene provenance.  GL and CL corrupt data in transit, not at rest:
applying them to a scene only records the spec; detectors consume it when
they assemble the shared payload (see perception).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import TransformError
from .jsonio import canonical_json
from .rng import SplitMix64, derive_seed
from .scene import (
    ROLE_CAV,
    AgentTrack,
    Frame,
    PointCloud,
    Pose,
    Scene,
)

KIND_CT = "CT"
KIND_SM = "SM"
KIND_GL = "GL"
KIND_CL = "CL"
KIND_RN = "RN"
KIND_SW = "SW"
KIND_FG = "FG"

ALL_KINDS = (KIND_CT, KIND_SM, KIND_GL, KIND_CL, KIND_RN, KIND_SW, KIND_FG)
WEATHER_KINDS = (KIND_RN, KIND_SW, KIND_FG)
LOSSY_KINDS = (KIND_GL, KIND_CL)

# Sampling ranges per operator parameter: rain/snow rate in mm/h, fog
# visibility in m, latency in ms, lossy probabilities, misalignment in
# m and degrees.
PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    KIND_RN: {"r_n": (0.1, 10.0)},
    KIND_SW: {"s_w": (0.1, 2.4)},
    KIND_FG: {"f_g": (200.0, 1000.0)},
    KIND_CT: {"c_t": (0.0, 300.0)},
    KIND_CL: {"p_c": (0.0, 1.0)},
    KIND_GL: {"p_g": (0.0, 1.0)},
    KIND_SM: {
        "t_x": (-0.2, 0.2),
        "t_y": (-0.2, 0.2),
        "t_z": (-0.2, 0.2),
        "r_z": (-2.0, 2.0),
    },
}

# Weather model constants.  The per-meter extinction coefficients are
# harness choices tied to the sampled weather semantics (visibility-defined
# fog via the 3.912/V relation; power laws for rain rate and snowfall);
# tests assert monotone degradation and determinism, never these numbers.
FOG_EXTINCTION_NUMERATOR = 3.912
RAIN_EXTINCTION_COEF = 2e-4
RAIN_EXTINCTION_EXP = 0.6
SNOW_EXTINCTION_COEF = 8e-4
SNOW_EXTINCTION_EXP = 0.8
SCATTER_SHARPNESS = 20.0  # beta in p_scat = 1 - exp(-beta * alpha * R)
SCATTER_INTENSITY_GAIN = 0.3  # scattered return keeps this fraction of i'
INTENSITY_FLOOR = 0.01  # returns attenuated below this are lost
MIN_SCATTER_RANGE = 1.5  # meters; nearest range a backscatter lands at


@dataclass(frozen=True)
class TransformSpec:
    """One sampled transformation: operator kind, parameters, RNG seed."""

    kind: str
    params: tuple[tuple[str, float], ...]
    seed: int

    @staticmethod
    def create(kind: str, params: Mapping[str, float], seed: int) -> "TransformSpec":
        if kind not in ALL_KINDS:
            raise TransformError(f"unknown operator kind {kind!r}")
        frozen = tuple(sorted((str(k), float(v)) for k, v in params.items()))
        return TransformSpec(kind, frozen, int(seed))

    def param(self, name: str) -> float:
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)

    def params_dict(self) -> dict[str, float]:
        return dict(self.params)

    def to_json_obj(self) -> dict:
        return {"kind": self.kind, "params": self.params_dict(), "seed": self.seed}

    @staticmethod
    def from_json_obj(obj: Mapping) -> "TransformSpec":
        return TransformSpec.create(obj["kind"], obj["params"], obj["seed"])

    def digest(self) -> str:
        """Stable text form used for deterministic tie-breaking."""
        return canonical_json(self.to_json_obj()).replace("\n", " ")


def sample_params(kind: str, rng_seed: int) -> TransformSpec:
    """Uniform parameter draw within the operator's documented range."""
    if kind not in PARAM_RANGES:
        raise TransformError(f"unknown operator kind {kind!r}")
    stream = SplitMix64(derive_seed(rng_seed, "params", kind))
    params = {
        name: stream.uniform(lo, hi)
        for name, (lo, hi) in sorted(PARAM_RANGES[kind].items())
    }
    return TransformSpec.create(kind, params, rng_seed)


# ---------------------------------------------------------------------------
# shared payload abstraction for lossy transmission


@dataclass(frozen=True)
class SharedPayload:
    """Named channels x rows of scalars: what one agent transmits.

    Early fusion payloads are point attributes (x, y, z, intensity); late
    fusion payloads are detection fields (cx, cy, cz, l, w, h, yaw, score).
    """

    channels: tuple[str, ...]
    values: np.ndarray  # (C, N) float64

    @staticmethod
    def create(channels: Sequence[str], values) -> "SharedPayload":
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] != len(channels):
            raise ValueError(f"values must be ({len(channels)}, N), got {arr.shape}")
        if not np.all(np.isfinite(arr)) and arr.size:
            raise ValueError("payload values must be finite")
        arr.flags.writeable = False
        return SharedPayload(tuple(channels), arr)

    @property
    def channel_count(self) -> int:
        return len(self.channels)


POINT_CHANNELS = ("x", "y", "z", "intensity")
BOX_CHANNELS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "score")


def payload_from_points(points: np.ndarray) -> SharedPayload:
    return SharedPayload.create(POINT_CHANNELS, np.asarray(points, dtype=np.float64).T)


def points_from_payload(payload: SharedPayload) -> np.ndarray:
    """Back to (N, 4) float32 rows; intensity clipped to the legal range.

    Noise drawn from the global payload range can push the intensity
    column outside [0, 1]; receiver-side sanitization clips it.
    """
    pts = payload.values.T.astype(np.float32).copy()
    if pts.size:
        pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return pts


def apply_lossy_global(
    payload: SharedPayload, p_g: float, rng: SplitMix64
) -> SharedPayload:
    """Replace each scalar independently with probability p_g.

    Replacement values are uniform over the [min, max] of the whole
    payload, treated as one flat matrix.
    """
    if not 0.0 <= p_g <= 1.0:
        raise TransformError(f"p_g outside [0, 1]: {p_g}")
    values = payload.values
    if p_g == 0.0 or values.size == 0:
        return payload
    lo = float(values.min())
    hi = float(values.max())
    flat = values.reshape(-1)
    hit = rng.random(flat.size) < p_g
    noise = rng.uniform(lo, hi, flat.size)
    out = np.where(hit, noise, flat).reshape(values.shape)
    return SharedPayload.create(payload.channels, out)


def apply_lossy_channel(
    payload: SharedPayload, p_c: float, rng: SplitMix64
) -> SharedPayload:
    """Corrupt exactly floor(p_c * C) whole channels.

    Each selected channel is overwritten with uniform noise within that
    channel's own original [min, max]; other channels are untouched.
    """
    if not 0.0 <= p_c <= 1.0:
        raise TransformError(f"p_c outside [0, 1]: {p_c}")
    n_channels = payload.channel_count
    n_corrupt = int(math.floor(p_c * n_channels))
    if n_corrupt == 0 or payload.values.shape[1] == 0:
        return payload
    chosen = rng.choice_without_replacement(n_channels, n_corrupt)
    out = payload.values.copy()
    for ch in chosen:
        lo = float(out[ch].min())
        hi = float(out[ch].max())
        out[ch] = rng.uniform(lo, hi, out.shape[1])
    return SharedPayload.create(payload.channels, out)


def pending_lossy_specs(scene: Scene) -> tuple[TransformSpec, ...]:
    """Lossy specs recorded in provenance, awaiting transmission time."""
    return tuple(s for s in scene.provenance if s.kind in LOSSY_KINDS)


# ---------------------------------------------------------------------------
# communication operators


def _delayed_track(track: AgentTrack, cutoff: int, agent: str) -> AgentTrack:
    frames = tuple(f for f in track.frames if f.timestamp <= cutoff)
    if not frames:
        raise TransformError(
            f"agent {agent}: no frame at or before t={cutoff} to replay"
        )
    return replace(track, frames=frames)


def apply_ct(scene: Scene, c_t_ms: float) -> Scene:
    """Communication latency: connected vehicles replay stale packets.

    Frames newer than eval_timestamp - c_t are dropped from every
    connected-vehicle track, so the packet available at evaluation is at
    least c_t old.  The ego track and ground truth are untouched.
    """
    spec = TransformSpec.create(KIND_CT, {"c_t": c_t_ms}, 0)
    return _ct(scene, c_t_ms).with_provenance(spec)


def _ct(scene: Scene, c_t_ms: float) -> Scene:
    if c_t_ms < 0:
        raise TransformError(f"c_t must be >= 0, got {c_t_ms}")
    if c_t_ms == 0:
        return scene
    cutoff = scene.eval_timestamp - int(math.ceil(c_t_ms))
    agents = tuple(
        _delayed_track(t, cutoff, t.agent_id) if t.role == ROLE_CAV else t
        for t in scene.agents
    )
    return replace(scene, agents=agents)


def apply_sm(
    scene: Scene, t_x: float, t_y: float, t_z: float, r_z_deg: float
) -> Scene:
    """Spatial misalignment: a localization error on reported cav poses.

    The error transform (translation, z-rotation) pre-multiplies every
    connected vehicle's world pose; local clouds are untouched.
    """
    spec = TransformSpec.create(
        KIND_SM, {"t_x": t_x, "t_y": t_y, "t_z": t_z, "r_z": r_z_deg}, 0
    )
    return _sm(scene, t_x, t_y, t_z, r_z_deg).with_provenance(spec)


def _sm(scene: Scene, t_x: float, t_y: float, t_z: float, r_z_deg: float) -> Scene:
    if t_x == 0.0 and t_y == 0.0 and t_z == 0.0 and r_z_deg == 0.0:
        return scene
    r_z = math.radians(r_z_deg)
    c, s = math.cos(r_z), math.sin(r_z)
    error = np.array(
        [
            [c, -s, 0.0, t_x],
            [s, c, 0.0, t_y],
            [0.0, 0.0, 1.0, t_z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    agents = []
    for track in scene.agents:
        if track.role != ROLE_CAV:
            agents.append(track)
            continue
        frames = tuple(
            Frame(f.timestamp, Pose.from_matrix(error @ f.pose.matrix), f.cloud)
            for f in track.frames
        )
        agents.append(replace(track, frames=frames))
    return replace(scene, agents=tuple(agents))


# ---------------------------------------------------------------------------
# weather operators


def extinction_coefficient(kind: str, intensity: float) -> float:
    """Per-meter extinction for the sampled weather intensity."""
    if kind == KIND_FG:
        return FOG_EXTINCTION_NUMERATOR / intensity
    if kind == KIND_RN:
        return RAIN_EXTINCTION_COEF * intensity**RAIN_EXTINCTION_EXP
    if kind == KIND_SW:
        return SNOW_EXTINCTION_COEF * intensity**SNOW_EXTINCTION_EXP
    raise TransformError(f"not a weather kind: {kind!r}")


def attenuate_cloud(points: np.ndarray, alpha: float, rng: SplitMix64) -> np.ndarray:
    """Range-dependent attenuation, dropout, and backscatter on one cloud.

    Per point at range R with intensity i:
      i' = i * exp(-2 * alpha * R)                   two-way attenuation
      dropped when i' < INTENSITY_FLOOR              (deterministic, so the
                                                      survivor count is
                                                      non-increasing in alpha)
      else with prob 1 - exp(-beta * alpha * R) the return is a backscatter:
          relocated along its beam to a uniform range in
          [MIN_SCATTER_RANGE, R] with intensity SCATTER_INTENSITY_GAIN * i'
      else kept in place with intensity i'.
    """
    if alpha <= 0.0 or points.shape[0] == 0:
        return points
    pts = points.astype(np.float64)
    ranges = np.linalg.norm(pts[:, :3], axis=1)
    safe_ranges = np.maximum(ranges, 1e-9)
    attenuated = pts[:, 3] * np.exp(-2.0 * alpha * ranges)
    keep = attenuated >= INTENSITY_FLOOR

    # Draw for every input point so the stream layout is branch-free.
    scatter_u = rng.random(len(pts))
    range_u = rng.random(len(pts))

    p_scat = 1.0 - np.exp(-SCATTER_SHARPNESS * alpha * ranges)
    scattered = keep & (scatter_u < p_scat)

    out = pts.copy()
    out[:, 3] = attenuated
    if np.any(scattered):
        lo = np.minimum(MIN_SCATTER_RANGE, ranges[scattered])
        new_range = lo + (ranges[scattered] - lo) * range_u[scattered]
        direction = pts[scattered, :3] / safe_ranges[scattered, None]
        out[scattered, :3] = direction * new_range[:, None]
        out[scattered, 3] = SCATTER_INTENSITY_GAIN * attenuated[scattered]
    out[:, 3] = np.clip(out[:, 3], 0.0, 1.0)
    return out[keep].astype(np.float32)


def apply_weather(scene: Scene, kind: str, intensity: float, seed: int) -> Scene:
    """One weather condition over the whole scene.

    The same extinction coefficient, floor, and scatter parameters apply
    to every agent; per-frame substreams keep the output deterministic in
    (scene, kind, intensity, seed).
    """
    lo, hi = next(iter(PARAM_RANGES[kind].values()))
    if not lo <= intensity <= hi:
        raise TransformError(
            f"{kind} intensity {intensity} outside ({lo}, {hi})"
        )
    spec = TransformSpec.create(
        kind, {next(iter(PARAM_RANGES[kind])): intensity}, seed
    )
    return _weather(scene, kind, intensity, seed).with_provenance(spec)


def _weather(scene: Scene, kind: str, intensity: float, seed: int) -> Scene:
    alpha = extinction_coefficient(kind, intensity)
    agents = []
    for track in scene.agents:
        frames = []
        for frame in track.frames:
            stream = SplitMix64(
                derive_seed(seed, scene.scene_id, kind, track.agent_id, frame.timestamp)
            )
            pts = attenuate_cloud(frame.cloud.points, alpha, stream)
            frames.append(Frame(frame.timestamp, frame.pose, PointCloud.from_array(pts)))
        agents.append(replace(track, frames=tuple(frames)))
    return replace(scene, agents=tuple(agents))


# ---------------------------------------------------------------------------
# dispatch


def apply(spec: TransformSpec, scene: Scene) -> Scene:
    """Apply one sampled transformation; ground truth is never rewritten."""
    if spec.kind == KIND_CT:
        out = _ct(scene, spec.param("c_t"))
    elif spec.kind == KIND_SM:
        out = _sm(
            scene,
            spec.param("t_x"),
            spec.param("t_y"),
            spec.param("t_z"),
            spec.param("r_z"),
        )
    elif spec.kind in LOSSY_KINDS:
        # Lossy communication corrupts the payload in transit; detectors
        # read the provenance entry and corrupt their own shared payload.
        out = scene
    elif spec.kind in WEATHER_KINDS:
        intensity = spec.param(next(iter(PARAM_RANGES[spec.kind])))
        lo, hi = next(iter(PARAM_RANGES[spec.kind].values()))
        if not lo <= intensity <= hi:
            raise TransformError(
                f"{spec.kind} intensity {intensity} outside ({lo}, {hi})"
            )
        out = _weather(scene, spec.kind, intensity, spec.seed)
    else:
        raise TransformError(f"unknown operator kind {spec.kind!r}")
    return out.with_provenance(spec)

"""Deterministic synthetic scenes with known ground truth.

Vehicles are car-sized cuboids on a flat ground plane; each agent samples
points on the cuboid faces visible from its sensor, with surface density
falling off as 1/R^2 and an optional line-of-sight shadow test against the
other cuboids.  Everything is a pure function of the configuration, so
scenes are byte-identical across runs and across parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import SceneValidationError
from .geometry import make_pose
from .rng import SplitMix64, derive_seed
from .scene import (
    ROLE_CAV,
    ROLE_EGO,
    AgentTrack,
    Box3D,
    Frame,
    PointCloud,
    Scene,
    normalize_yaw,
)

SENSOR_HEIGHT = 1.6  # roof-mounted LiDAR height in meters
REFERENCE_RANGE = 10.0  # range at which the sampling density is nominal

CAR_LENGTH_RANGE = (3.8, 5.2)
CAR_WIDTH_RANGE = (1.7, 2.1)
CAR_HEIGHT_RANGE = (1.4, 1.8)

_MIN_VEHICLE_CLEARANCE = 0.8  # gap beyond bounding diagonals
_MIN_AGENT_VEHICLE_DIST = 5.0
_MIN_AGENT_AGENT_DIST = 8.0
_PLACEMENT_RETRIES_PER_VEHICLE = 200

INTENSITY_RANGE = (0.3, 0.9)


@dataclass(frozen=True)
class SynthConfig:
    n_vehicles: int = 8
    area: float = 60.0  # square half-extent in meters
    n_cavs: int = 1
    frames: int = 1
    frame_dt: int = 100  # milliseconds between frames
    points_per_m2: float = 24.0
    occlusion: bool = True
    master_seed: int = 0
    max_speed: float = 10.0  # m/s upper bound for vehicle/agent motion

    def __post_init__(self):
        if self.n_vehicles < 0:
            raise ValueError("n_vehicles must be >= 0")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.points_per_m2 <= 0:
            raise ValueError("points_per_m2 must be > 0")
        if self.frame_dt <= 0:
            raise ValueError("frame_dt must be > 0")


@dataclass(frozen=True)
class Vehicle:
    """A target cuboid resting on the ground plane."""

    center_xy: tuple[float, float]
    dims: tuple[float, float, float]  # (l, w, h)
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def at(self, t_ms: int) -> "Vehicle":
        dt = t_ms / 1000.0
        x, y = self.center_xy
        vx, vy = self.velocity
        return Vehicle((x + vx * dt, y + vy * dt), self.dims, self.yaw, self.velocity)


@dataclass(frozen=True)
class AgentInit:
    agent_id: str
    role: str
    position_xy: tuple[float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def at(self, t_ms: int) -> "AgentInit":
        dt = t_ms / 1000.0
        x, y = self.position_xy
        vx, vy = self.velocity
        return AgentInit(
            self.agent_id, self.role, (x + vx * dt, y + vy * dt), self.yaw, self.velocity
        )


# ---------------------------------------------------------------------------
# surface sampling


def _rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _vehicle_faces(vehicle: Vehicle):
    """(face center, outward normal, in-plane axes, extents) in world frame."""
    l, w, h = vehicle.dims
    cx, cy = vehicle.center_xy
    center = np.array([cx, cy, h / 2.0])
    rot = _rot2(vehicle.yaw)
    u = np.array([*rot[:, 0], 0.0])  # along length
    v = np.array([*rot[:, 1], 0.0])  # along width
    z = np.array([0.0, 0.0, 1.0])
    faces = [
        (center + u * (l / 2), u, (v, z), (w, h)),
        (center - u * (l / 2), -u, (v, z), (w, h)),
        (center + v * (w / 2), v, (u, z), (l, h)),
        (center - v * (w / 2), -v, (u, z), (l, h)),
        (center + z * (h / 2), z, (u, v), (l, w)),  # roof; bottom never seen
    ]
    return faces


def _segment_blocked(
    sensor_local: np.ndarray, pts_local: np.ndarray, half: np.ndarray
) -> np.ndarray:
    """Slab test: does segment sensor->point cross the axis-aligned box."""
    d = pts_local - sensor_local
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - sensor_local) / d
        t2 = (half - sensor_local) / d
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    degenerate = np.abs(d) < 1e-12
    sensor_inside_slab = np.abs(sensor_local) <= half
    near = np.where(degenerate, np.where(sensor_inside_slab, -np.inf, np.inf), near)
    far = np.where(degenerate, np.where(sensor_inside_slab, np.inf, -np.inf), far)
    tmin = near.max(axis=1)
    tmax = far.min(axis=1)
    return (tmax >= tmin) & (tmin < 1.0 - 1e-6) & (tmax > 1e-6)


def _occluded(
    sensor: np.ndarray, points: np.ndarray, blockers: Sequence[Vehicle]
) -> np.ndarray:
    blocked = np.zeros(points.shape[0], dtype=bool)
    for blocker in blockers:
        l, w, h = blocker.dims
        center = np.array([*blocker.center_xy, h / 2.0])
        rot = _rot2(blocker.yaw)
        to_local = np.eye(3)
        to_local[:2, :2] = rot.T
        sensor_local = to_local @ (sensor - center)
        pts_local = (points - center) @ to_local.T
        half = np.array([l / 2, w / 2, h / 2])
        blocked |= _segment_blocked(sensor_local, pts_local, half)
    return blocked


def sample_agent_cloud(
    sensor: np.ndarray,
    agent_yaw: float,
    vehicles: Sequence[Vehicle],
    points_per_m2: float,
    occlusion: bool,
    stream: SplitMix64,
) -> np.ndarray:
    """Points (N, 4) in the agent frame for one sensor position."""
    collected = []
    for v_idx, vehicle in enumerate(vehicles):
        for center, normal, (axis_a, axis_b), (ext_a, ext_b) in _vehicle_faces(vehicle):
            to_sensor = sensor - center
            if float(np.dot(normal, to_sensor)) <= 1e-9:
                continue
            face_range = float(np.linalg.norm(to_sensor))
            density_scale = min(1.0, (REFERENCE_RANGE / max(face_range, 1e-6)) ** 2)
            count = int(round(ext_a * ext_b * points_per_m2 * density_scale))
            if count == 0:
                continue
            a = stream.uniform(-0.5, 0.5, count) * ext_a
            b = stream.uniform(-0.5, 0.5, count) * ext_b
            pts = center + a[:, None] * axis_a + b[:, None] * axis_b
            intensity = stream.uniform(*INTENSITY_RANGE, count)
            if occlusion:
                blockers = [w for i, w in enumerate(vehicles) if i != v_idx]
                if blockers:
                    keep = ~_occluded(sensor, pts, blockers)
                    pts, intensity = pts[keep], intensity[keep]
            if pts.shape[0]:
                collected.append(np.column_stack([pts, intensity]))
    if not collected:
        return np.empty((0, 4), dtype=np.float32)
    world = np.concatenate(collected, axis=0)
    rot = _rot2(agent_yaw)
    local = world.copy()
    local[:, :2] = (world[:, :2] - sensor[:2]) @ rot
    local[:, 2] = world[:, 2] - sensor[2]
    return local.astype(np.float32)


# ---------------------------------------------------------------------------
# scene assembly


def compose_scene(
    scene_id: str,
    vehicles: Sequence[Vehicle],
    agents: Sequence[AgentInit],
    frames: int = 1,
    frame_dt: int = 100,
    points_per_m2: float = 24.0,
    occlusion: bool = True,
    master_seed: int = 0,
) -> Scene:
    """Build a scene from explicit vehicle and agent placements.

    The random generators feed this; tests use it directly to stage
    occlusion and visibility geometry.
    """
    timestamps = [k * frame_dt for k in range(frames)]
    eval_ts = timestamps[-1]
    tracks = []
    for agent in agents:
        track_frames = []
        for ts in timestamps:
            moved = agent.at(ts)
            x, y = moved.position_xy
            sensor = np.array([x, y, SENSOR_HEIGHT])
            # Per-agent sampling stream, re-created identically for every
            # frame: a static scene yields bit-identical frame clouds.
            stream = SplitMix64(derive_seed(master_seed, "cloud", agent.agent_id))
            pts = sample_agent_cloud(
                sensor,
                moved.yaw,
                [v.at(ts) for v in vehicles],
                points_per_m2,
                occlusion,
                stream,
            )
            pose = make_pose(x, y, SENSOR_HEIGHT, moved.yaw)
            track_frames.append(Frame(ts, pose, PointCloud.from_array(pts)))
        tracks.append(AgentTrack(agent.agent_id, agent.role, tuple(track_frames)))

    ego = next(a for a in agents if a.role == ROLE_EGO)
    ego_at_eval = ego.at(eval_ts)
    ex, ey = ego_at_eval.position_xy
    rot = _rot2(ego_at_eval.yaw)
    ground_truth = []
    for vehicle in vehicles:
        moved = vehicle.at(eval_ts)
        l, w, h = moved.dims
        world = np.array([*moved.center_xy, h / 2.0])
        delta = world - np.array([ex, ey, SENSOR_HEIGHT])
        local_xy = rot.T @ delta[:2]
        ground_truth.append(
            Box3D.create(
                (local_xy[0], local_xy[1], delta[2]),
                moved.dims,
                normalize_yaw(moved.yaw - ego_at_eval.yaw),
                1.0,
            )
        )
    return Scene(
        scene_id=scene_id,
        eval_timestamp=eval_ts,
        agents=tuple(tracks),
        ground_truth=tuple(ground_truth),
    )


def _place_agents(cfg: SynthConfig, stream: SplitMix64) -> list[AgentInit]:
    agents = []
    names = [("ego", ROLE_EGO)] + [(f"cav-{i + 1}", ROLE_CAV) for i in range(cfg.n_cavs)]
    half = cfg.area / 2.0
    for agent_id, role in names:
        for _ in range(_PLACEMENT_RETRIES_PER_VEHICLE):
            x = stream.uniform(-half, half)
            y = stream.uniform(-half, half)
            if all(
                math.hypot(x - a.position_xy[0], y - a.position_xy[1])
                >= _MIN_AGENT_AGENT_DIST
                for a in agents
            ):
                break
        else:
            raise SceneValidationError("cannot place agents without crowding")
        yaw = stream.uniform(-math.pi, math.pi)
        speed = stream.uniform(0.0, cfg.max_speed)
        heading = stream.uniform(-math.pi, math.pi)
        agents.append(
            AgentInit(
                agent_id,
                role,
                (x, y),
                yaw,
                (speed * math.cos(heading), speed * math.sin(heading)),
            )
        )
    return agents


def _place_vehicles(
    cfg: SynthConfig, agents: Sequence[AgentInit], stream: SplitMix64
) -> list[Vehicle]:
    vehicles: list[Vehicle] = []
    budget = _PLACEMENT_RETRIES_PER_VEHICLE * max(cfg.n_vehicles, 1)
    attempts = 0
    while len(vehicles) < cfg.n_vehicles:
        attempts += 1
        if attempts > budget:
            raise SceneValidationError(
                f"cannot place {cfg.n_vehicles} vehicles without overlap "
                f"after {budget} attempts"
            )
        x = stream.uniform(-cfg.area, cfg.area)
        y = stream.uniform(-cfg.area, cfg.area)
        yaw = stream.uniform(-math.pi, math.pi)
        l = stream.uniform(*CAR_LENGTH_RANGE)
        w = stream.uniform(*CAR_WIDTH_RANGE)
        h = stream.uniform(*CAR_HEIGHT_RANGE)
        diag = math.hypot(l, w) / 2.0
        ok = all(
            math.hypot(x - v.center_xy[0], y - v.center_xy[1])
            >= diag + math.hypot(v.dims[0], v.dims[1]) / 2.0 + _MIN_VEHICLE_CLEARANCE
            for v in vehicles
        ) and all(
            math.hypot(x - a.position_xy[0], y - a.position_xy[1])
            >= _MIN_AGENT_VEHICLE_DIST
            for a in agents
        )
        if not ok:
            continue
        speed = stream.uniform(0.0, cfg.max_speed)
        heading = stream.uniform(-math.pi, math.pi)
        vehicles.append(
            Vehicle(
                (x, y),
                (l, w, h),
                yaw,
                (speed * math.cos(heading), speed * math.sin(heading)),
            )
        )
    return vehicles


def _generate(cfg: SynthConfig, frames: int, scene_id: Optional[str]) -> Scene:
    stream = SplitMix64(derive_seed(cfg.master_seed, "placement"))
    agents = _place_agents(cfg, stream)
    vehicles = _place_vehicles(cfg, agents, stream)
    return compose_scene(
        scene_id or f"synth-{cfg.master_seed:016x}",
        vehicles,
        agents,
        frames=frames,
        frame_dt=cfg.frame_dt,
        points_per_m2=cfg.points_per_m2,
        occlusion=cfg.occlusion,
        master_seed=cfg.master_seed,
    )


def generate_scene(cfg: SynthConfig, scene_id: Optional[str] = None) -> Scene:
    """One single-frame scene, deterministic in cfg.master_seed."""
    return _generate(cfg, frames=1, scene_id=scene_id)


def generate_sequence(cfg: SynthConfig, scene_id: Optional[str] = None) -> Scene:
    """A multi-frame scene; vehicles and agents move at constant velocity
    and the evaluation timestamp is the last frame."""
    if cfg.frames < 2:
        raise ValueError("generate_sequence requires frames >= 2")
    return _generate(cfg, frames=cfg.frames, scene_id=scene_id)

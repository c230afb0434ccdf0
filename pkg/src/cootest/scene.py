"""Multi-agent scene model and its on-disk format.

A scene directory holds `scene.json` (metadata, poses, ground truth,
provenance) plus one headerless binary cloud per agent frame at
`<agent_id>/<timestamp>.bin`, packed little-endian float32 quadruplets
(x, y, z, intensity).  Loading and saving round-trip with float
bit-equality; saving is a pure function of the scene value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import SceneFormatError, SceneValidationError
from .jsonio import canonical_json, read_json

if TYPE_CHECKING:
    from .operators import TransformSpec

ROLE_EGO = "ego"
ROLE_CAV = "cav"

_POINT_DTYPE = np.dtype("<f4")
_POINT_RECORD_BYTES = 16


def _frozen_array(values, dtype, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if shape is not None and arr.shape != shape:
        arr = arr.reshape(shape)
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Points as an (N, 4) float32 array of (x, y, z, intensity) rows."""

    points: np.ndarray

    @staticmethod
    def from_array(points) -> "PointCloud":
        arr = np.asarray(points, dtype=_POINT_DTYPE)
        if arr.size == 0:
            arr = arr.reshape(0, 4)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise SceneValidationError(f"point array must be (N, 4), got {arr.shape}")
        return PointCloud(_frozen_array(arr, _POINT_DTYPE))

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud.from_array(np.empty((0, 4), dtype=_POINT_DTYPE))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(
                self.points.view(np.uint32), other.points.view(np.uint32)
            )
        )

    def __hash__(self):
        return hash((self.points.shape, self.points.tobytes()))


@dataclass(frozen=True)
class Pose:
    """4x4 homogeneous transform, row-major, rotation block orthonormal."""

    matrix: np.ndarray

    @staticmethod
    def from_matrix(matrix) -> "Pose":
        return Pose(_frozen_array(matrix, np.float64, (4, 4)))

    @staticmethod
    def identity() -> "Pose":
        return Pose.from_matrix(np.eye(4))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.matrix.view(np.uint64), other.matrix.view(np.uint64))
        )

    def __hash__(self):
        return hash(self.matrix.tobytes())


@dataclass(frozen=True)
class Frame:
    timestamp: int  # integer milliseconds
    pose: Pose  # agent-to-world transform at this timestamp
    cloud: PointCloud  # points in the agent frame


@dataclass(frozen=True)
class AgentTrack:
    agent_id: str
    role: str  # ROLE_EGO or ROLE_CAV
    frames: tuple[Frame, ...]


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center/dims in meters, yaw about +z, confidence [0, 1]."""

    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (l, w, h)
    yaw: float
    confidence: float = 1.0

    @staticmethod
    def create(center, dims, yaw, confidence=1.0) -> "Box3D":
        cx, cy, cz = (float(v) for v in center)
        l, w, h = (float(v) for v in dims)
        return Box3D((cx, cy, cz), (l, w, h), normalize_yaw(float(yaw)), float(confidence))

    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Scene:
    scene_id: str
    eval_timestamp: int
    agents: tuple[AgentTrack, ...]
    ground_truth: tuple[Box3D, ...]
    provenance: tuple["TransformSpec", ...] = field(default_factory=tuple)

    def ego_track(self) -> AgentTrack:
        for track in self.agents:
            if track.role == ROLE_EGO:
                return track
        raise SceneValidationError(f"scene {self.scene_id} has no ego agent")

    def cav_tracks(self) -> tuple[AgentTrack, ...]:
        return tuple(t for t in self.agents if t.role == ROLE_CAV)

    def with_provenance(self, spec: "TransformSpec") -> "Scene":
        return replace(self, provenance=self.provenance + (spec,))


def evaluation_frame(track: AgentTrack, eval_timestamp: int) -> Frame:
    """Latest frame at or before the evaluation timestamp.

    This is the packet a receiver holds at evaluation time; the latency
    operator shapes it by dropping frames newer than the delayed cutoff.
    """
    chosen = None
    for frame in track.frames:
        if frame.timestamp <= eval_timestamp:
            chosen = frame
    if chosen is None:
        raise SceneValidationError(
            f"agent {track.agent_id} has no frame at or before t={eval_timestamp}"
        )
    return chosen


# ---------------------------------------------------------------------------
# validation


def _check_pose(matrix: np.ndarray, where: str, out: list[str]) -> None:
    if not np.all(np.isfinite(matrix)):
        out.append(f"{where}: non-finite pose entries")
        return
    if not np.allclose(matrix[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
        out.append(f"{where}: last row must be (0, 0, 0, 1)")
    rot = matrix[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
        out.append(f"{where}: rotation block not orthonormal")
    elif abs(float(np.linalg.det(rot)) - 1.0) > 1e-6:
        out.append(f"{where}: rotation block determinant != 1")


def _check_box(box: Box3D, where: str, out: list[str]) -> None:
    values = (*box.center, *box.dims, box.yaw, box.confidence)
    if not all(math.isfinite(v) for v in values):
        out.append(f"{where}: non-finite field")
        return
    if min(box.dims) <= 0.0:
        out.append(f"{where}.dims: must be strictly positive, got {box.dims}")
    if not (-math.pi < box.yaw <= math.pi):
        out.append(f"{where}.yaw: not normalized to (-pi, pi], got {box.yaw}")
    if not 0.0 <= box.confidence <= 1.0:
        out.append(f"{where}.confidence: outside [0, 1], got {box.confidence}")


def validate(scene: Scene) -> list[str]:
    """All invariant violations, empty when the scene is well formed."""
    out: list[str] = []
    ego_count = 0
    for a_idx, track in enumerate(scene.agents):
        where = f"agents[{a_idx}]({track.agent_id})"
        if track.role == ROLE_EGO:
            ego_count += 1
            if ego_count > 1:
                out.append(f"{where}: duplicate ego agent")
        elif track.role != ROLE_CAV:
            out.append(f"{where}.role: unknown role {track.role!r}")
        if not track.frames:
            out.append(f"{where}.frames: at least one frame required")
        prev_ts = None
        for f_idx, frame in enumerate(track.frames):
            fwhere = f"{where}.frames[{f_idx}]"
            if prev_ts is not None and frame.timestamp <= prev_ts:
                out.append(f"{fwhere}.timestamp: not strictly increasing")
            prev_ts = frame.timestamp
            _check_pose(frame.pose.matrix, f"{fwhere}.pose", out)
            pts = frame.cloud.points
            if pts.size and not np.all(np.isfinite(pts[:, :3])):
                out.append(f"{fwhere}.cloud: non-finite coordinates")
            if pts.size and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
                out.append(f"{fwhere}.cloud: intensity outside [0, 1]")
    if ego_count == 0:
        out.append("agents: no ego agent")
    else:
        ego = next(t for t in scene.agents if t.role == ROLE_EGO)
        if all(f.timestamp != scene.eval_timestamp for f in ego.frames):
            out.append(
                f"eval_timestamp: {scene.eval_timestamp} not present in ego track"
            )
    for g_idx, box in enumerate(scene.ground_truth):
        where = f"ground_truth[{g_idx}]"
        _check_box(box, where, out)
        if box.confidence != 1.0:
            out.append(f"{where}.confidence: ground truth must be 1.0")
    return out


def require_valid(scene: Scene) -> Scene:
    violations = validate(scene)
    if violations:
        raise SceneValidationError(
            f"scene {scene.scene_id}: " + "; ".join(violations[:5])
        )
    return scene


# ---------------------------------------------------------------------------
# structural equality


def scenes_equal(a: Scene, b: Scene, ignore_provenance: bool = False) -> bool:
    """Field-for-field equality with float bit-equality on arrays."""
    if (a.scene_id, a.eval_timestamp) != (b.scene_id, b.eval_timestamp):
        return False
    if a.ground_truth != b.ground_truth:
        return False
    if len(a.agents) != len(b.agents):
        return False
    for ta, tb in zip(a.agents, b.agents):
        if (ta.agent_id, ta.role) != (tb.agent_id, tb.role):
            return False
        if len(ta.frames) != len(tb.frames):
            return False
        for fa, fb in zip(ta.frames, tb.frames):
            if fa.timestamp != fb.timestamp:
                return False
            if fa.pose != fb.pose or fa.cloud != fb.cloud:
                return False
    if not ignore_provenance and a.provenance != b.provenance:
        return False
    return True


# ---------------------------------------------------------------------------
# persistence


def save_scene(scene: Scene, path) -> None:
    """Write a scene directory; byte-identical for equal scene values."""
    require_valid(scene)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "scene_id": scene.scene_id,
        "eval_timestamp": scene.eval_timestamp,
        "agents": [],
        "ground_truth": [
            {
                "center": list(box.center),
                "dims": list(box.dims),
                "yaw": box.yaw,
                "confidence": box.confidence,
            }
            for box in scene.ground_truth
        ],
        "provenance": [spec.to_json_obj() for spec in scene.provenance],
    }
    for track in scene.agents:
        agent_dir = root / track.agent_id
        agent_dir.mkdir(parents=True, exist_ok=True)
        frames = []
        for frame in track.frames:
            rel = f"{track.agent_id}/{frame.timestamp}.bin"
            frames.append(
                {
                    "timestamp": frame.timestamp,
                    "pose": [float(v) for v in frame.pose.matrix.reshape(16)],
                    "cloud": rel,
                }
            )
            (root / rel).write_bytes(
                np.ascontiguousarray(frame.cloud.points, dtype=_POINT_DTYPE).tobytes()
            )
        meta["agents"].append(
            {"agent_id": track.agent_id, "role": track.role, "frames": frames}
        )
    (root / "scene.json").write_text(
        canonical_json(meta), encoding="utf-8", newline="\n"
    )


def _load_cloud(path: Path) -> PointCloud:
    if not path.is_file():
        raise SceneFormatError(f"cloud file not found: {path}")
    raw = path.read_bytes()
    if len(raw) % _POINT_RECORD_BYTES != 0:
        raise SceneFormatError(
            f"{path}: {len(raw)} bytes is not a multiple of {_POINT_RECORD_BYTES}"
        )
    arr = np.frombuffer(raw, dtype=_POINT_DTYPE).reshape(-1, 4)
    return PointCloud.from_array(arr)


def load_scene(path) -> Scene:
    """Load and validate a scene directory written by save_scene."""
    from .operators import TransformSpec

    root = Path(path)
    meta_path = root / "scene.json"
    if not meta_path.is_file():
        raise SceneFormatError(f"metadata not found: {meta_path}")
    try:
        meta = read_json(meta_path)
    except ValueError as exc:
        raise SceneFormatError(f"{meta_path}: malformed JSON: {exc}") from exc

    try:
        agents = []
        for entry in meta["agents"]:
            frames = []
            for frame in entry["frames"]:
                pose = Pose.from_matrix(
                    np.asarray(frame["pose"], dtype=np.float64).reshape(4, 4)
                )
                cloud = _load_cloud(root / frame["cloud"])
                frames.append(Frame(int(frame["timestamp"]), pose, cloud))
            agents.append(
                AgentTrack(str(entry["agent_id"]), str(entry["role"]), tuple(frames))
            )
        ground_truth = tuple(
            Box3D(
                tuple(float(v) for v in box["center"]),
                tuple(float(v) for v in box["dims"]),
                float(box["yaw"]),
                float(box["confidence"]),
            )
            for box in meta["ground_truth"]
        )
        provenance = tuple(
            TransformSpec.from_json_obj(obj) for obj in meta.get("provenance", [])
        )
        scene = Scene(
            scene_id=str(meta["scene_id"]),
            eval_timestamp=int(meta["eval_timestamp"]),
            agents=tuple(agents),
            ground_truth=ground_truth,
            provenance=provenance,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{meta_path}: bad field: {exc}") from exc

    violations = validate(scene)
    if violations:
        raise SceneFormatError(
            f"{root}: invariant violations: " + "; ".join(violations[:5])
        )
    return scene


def list_scene_dirs(suite_dir) -> list[Path]:
    """Scene directories under a suite root, ordered by name."""
    root = Path(suite_dir)
    if not root.is_dir():
        raise SceneFormatError(f"suite directory not found: {root}")
    return sorted(
        (p for p in root.iterdir() if (p / "scene.json").is_file()),
        key=lambda p: p.name,
    )

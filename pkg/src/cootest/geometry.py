"""SE(3) pose algebra and oriented-box overlap geometry.

Overlap between yaw-rotated boxes is computed exactly: footprints are
clipped with a Sutherland-Hodgman pass and areas come from the shoelace
formula.  All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene import Box3D, PointCloud, Pose, normalize_yaw

_VERTEX_MERGE_EPS = 1e-9  # vertices closer than this are merged (sliver guard)
_INSIDE_EPS = 1e-12


@dataclass(frozen=True)
class BevPolygon:
    """Convex counter-clockwise polygon in the ground plane."""

    vertices: np.ndarray  # (N, 2) float64

    @staticmethod
    def from_vertices(vertices) -> "BevPolygon":
        arr = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
            raise ValueError(f"polygon needs (N>=3, 2) vertices, got {arr.shape}")
        if arr.shape[0] > 8:
            raise ValueError("box-footprint clipping never yields more than 8 vertices")
        if polygon_area(arr) < 0.0:
            raise ValueError("vertices must be counter-clockwise")
        arr.flags.writeable = False
        return BevPolygon(arr)

    def area(self) -> float:
        return polygon_area(self.vertices)


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def box_corners_bev(box: Box3D) -> np.ndarray:
    """Footprint corners (4, 2), counter-clockwise."""
    l, w, _ = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array(
        [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(box.center[:2])


def _dedupe_vertices(vertices: list[np.ndarray]) -> np.ndarray:
    out: list[np.ndarray] = []
    for v in vertices:
        if out and np.hypot(*(v - out[-1])) < _VERTEX_MERGE_EPS:
            continue
        out.append(v)
    while len(out) > 1 and np.hypot(*(out[0] - out[-1])) < _VERTEX_MERGE_EPS:
        out.pop()
    return np.array(out) if out else np.empty((0, 2))


def clip_convex(subject: BevPolygon, clip: BevPolygon) -> Optional[BevPolygon]:
    """Intersection of two convex CCW polygons, or None when it is empty.

    Boundaries count as inside (closed sets), so edge-only contact yields a
    degenerate polygon that is discarded as zero-measure.
    """
    output = [v for v in subject.vertices]
    clip_verts = clip.vertices
    n_clip = len(clip_verts)
    for i in range(n_clip):
        if len(output) < 3:
            return None
        a = clip_verts[i]
        b = clip_verts[(i + 1) % n_clip]
        edge = b - a
        current = output
        output = []
        prev = current[-1]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        for vert in current:
            side = edge[0] * (vert[1] - a[1]) - edge[1] * (vert[0] - a[0])
            if side >= -_INSIDE_EPS:
                if prev_side < -_INSIDE_EPS:
                    output.append(_edge_intersection(prev, vert, a, b))
                output.append(vert)
            elif prev_side >= -_INSIDE_EPS:
                output.append(_edge_intersection(prev, vert, a, b))
            prev, prev_side = vert, side
    merged = _dedupe_vertices(output)
    if len(merged) < 3 or polygon_area(merged) <= 1e-12:
        return None
    return BevPolygon.from_vertices(merged)


def _edge_intersection(p, q, a, b) -> np.ndarray:
    d1 = q - p
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-18:
        return q.copy()
    t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom
    return p + t * d1


def _footprint_intersection_area(a: Box3D, b: Box3D) -> float:
    half_diag_a = math.hypot(a.dims[0], a.dims[1]) / 2.0
    half_diag_b = math.hypot(b.dims[0], b.dims[1]) / 2.0
    center_dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    if center_dist > half_diag_a + half_diag_b:
        return 0.0
    poly_a = BevPolygon.from_vertices(box_corners_bev(a))
    poly_b = BevPolygon.from_vertices(box_corners_bev(b))
    inter = clip_convex(poly_a, poly_b)
    return inter.area() if inter is not None else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of the yaw-rotated footprints, in [0, 1]."""
    inter = _footprint_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def intersection_volume(a: Box3D, b: Box3D) -> float:
    """Overlap volume of two yaw-only boxes: footprint overlap x z overlap."""
    lo = max(a.center[2] - a.dims[2] / 2.0, b.center[2] - b.dims[2] / 2.0)
    hi = min(a.center[2] + a.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0)
    if hi <= lo:
        return 0.0
    inter = _footprint_intersection_area(a, b)
    return inter * (hi - lo)


# ---------------------------------------------------------------------------
# pose algebra


def make_pose(
    x: float = 0.0,
    y: float = 0.0,
    z: float = 0.0,
    yaw: float = 0.0,
) -> Pose:
    """Pose from an xy(z) translation and a yaw about +z."""
    c, s = math.cos(yaw), math.sin(yaw)
    matrix = np.array(
        [
            [c, -s, 0.0, x],
            [s, c, 0.0, y],
            [0.0, 0.0, 1.0, z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return Pose.from_matrix(matrix)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose.from_matrix(a.matrix @ b.matrix)


def invert(a: Pose) -> Pose:
    rot = a.matrix[:3, :3]
    t = a.matrix[:3, 3]
    inv = np.eye(4)
    inv[:3, :3] = rot.T
    inv[:3, 3] = -rot.T @ t
    return Pose.from_matrix(inv)


def pose_yaw(pose: Pose) -> float:
    """Heading of the pose's rotation block about +z."""
    return math.atan2(pose.matrix[1, 0], pose.matrix[0, 0])


def transform_points(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Map each point through the pose; intensity untouched."""
    pts = cloud.points
    if len(pts) == 0:
        return cloud
    xyz = pts[:, :3].astype(np.float64)
    rot = pose.matrix[:3, :3]
    t = pose.matrix[:3, 3]
    moved = xyz @ rot.T + t
    out = np.empty_like(pts)
    out[:, :3] = moved.astype(np.float32)
    out[:, 3] = pts[:, 3]
    return PointCloud.from_array(out)


def transform_xyz(points_xyz: np.ndarray, pose: Pose) -> np.ndarray:
    rot = pose.matrix[:3, :3]
    t = pose.matrix[:3, 3]
    return points_xyz @ rot.T + t


def transform_box(box: Box3D, pose: Pose) -> Box3D:
    """Re-express a yaw-only box under a z-rotation + translation pose."""
    center = transform_xyz(np.asarray(box.center, dtype=np.float64)[None, :], pose)[0]
    return Box3D.create(
        tuple(center),
        box.dims,
        normalize_yaw(box.yaw + pose_yaw(pose)),
        box.confidence,
    )

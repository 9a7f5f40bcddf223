"""Synthetic observation generation: view spheres and ray-cast scans."""

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..errors import ValidationError
from .cloud import PointCloud, TriangleMesh

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

# unit icosahedron vertex/face tables
_ICO_VERTS = np.array(
    [
        (-1, GOLDEN, 0), (1, GOLDEN, 0), (-1, -GOLDEN, 0), (1, -GOLDEN, 0),
        (0, -1, GOLDEN), (0, 1, GOLDEN), (0, -1, -GOLDEN), (0, 1, -GOLDEN),
        (GOLDEN, 0, -1), (GOLDEN, 0, 1), (-GOLDEN, 0, -1), (-GOLDEN, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: position plus an orthonormal (right, up, forward) frame."""

    position: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    fov_deg: float = 90.0


def look_at(position, target=(0.0, 0.0, 0.0), fov_deg=90.0) -> CameraPose:
    """Camera at ``position`` whose view axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValidationError("camera position coincides with its target")
    forward = forward / norm
    hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ hint) > 0.99:
        hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, hint)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)
    return CameraPose(position, right, up, forward, fov_deg)


def _subdivide(verts, faces):
    verts = [v for v in verts]
    midpoint = {}

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in midpoint:
            m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
            m = m / np.linalg.norm(m)
            midpoint[key] = len(verts)
            verts.append(m)
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.asarray(verts), np.asarray(new_faces, dtype=np.int64)


def tessellated_sphere(subdivisions: int = 1, radius: float = 1.0) -> list[CameraPose]:
    """Cameras on a subdivided icosahedron, all looking at the origin.

    Subdivision 0 yields 12 viewpoints, 1 yields 42, 2 yields 162, 3 yields 642.
    """
    if not (0 <= int(subdivisions) <= 3):
        raise ValidationError(f"subdivisions must be in [0, 3], got {subdivisions}")
    if radius <= 0.0:
        raise ValidationError(f"radius must be positive, got {radius}")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES
    for _ in range(int(subdivisions)):
        verts, faces = _subdivide(verts, faces)
    return [look_at(v * radius) for v in verts]


def camera_rays(camera: CameraPose, resolution: int):
    """Pinhole ray grid through pixel centers; returns (origins, directions)."""
    if resolution < 1:
        raise ValidationError(f"resolution must be >= 1, got {resolution}")
    half = np.tan(np.radians(camera.fov_deg) / 2.0)
    coords = ((np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0) * half
    u, v = np.meshgrid(coords, coords, indexing="xy")
    dirs = (
        camera.forward[None, :]
        + u.reshape(-1, 1) * camera.right[None, :]
        + v.reshape(-1, 1) * camera.up[None, :]
    )
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def virtual_scan(mesh: TriangleMesh, cameras, resolution: int = 160) -> PointCloud:
    """First-hit ray-cast scan; per-camera results concatenated in camera order."""
    cameras = list(cameras)
    if not cameras:
        raise ValidationError("virtual_scan needs at least one camera")
    hits = []
    for camera in cameras:
        origins, dirs = camera_rays(camera, resolution)
        t, _ = _kernels.raycast_first_hit(origins, dirs, mesh.vertices, mesh.faces)
        mask = np.isfinite(t)
        if mask.any():
            hits.append(origins[mask] + t[mask, None] * dirs[mask])
    if not hits:
        raise ValidationError("no ray hit the mesh; check camera placement")
    return PointCloud(np.vstack(hits))


def single_view_scan(mesh: TriangleMesh, camera: CameraPose, resolution: int = 160) -> PointCloud:
    """Scan from one viewpoint; produces partially-observed clouds."""
    return virtual_scan(mesh, [camera], resolution)

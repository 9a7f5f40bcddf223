"""Point clouds, rigid transforms, triangle meshes, and voxel downsampling."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ValidationError
from .rotations import quat_conjugate, quat_multiply, quat_to_matrix


def _as_points(points, name="points"):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError(f"{name} must contain at least one point")
    if not np.isfinite(arr).all():
        bad = int(np.argwhere(~np.isfinite(arr).all(axis=1))[0, 0])
        raise ValidationError(f"{name} contains a non-finite coordinate at row {bad}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points in meters. Immutable and thread-safe."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points))

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.frame_id)


@dataclass(frozen=True)
class RigidParams:
    """Rigid transform as a unit quaternion (w, x, y, z) plus translation."""

    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(q).all() and np.isfinite(t).all()):
            raise ValidationError("rigid parameters must be finite")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValidationError("quaternion must have unit norm within 1e-9")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidParams":
        return cls()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def compose(self, other: "RigidParams") -> "RigidParams":
        """self after other: (self o other)(p) = self(other(p))."""
        q = quat_multiply(self.quaternion, other.quaternion)
        q = q / np.linalg.norm(q)
        t = self.rotation_matrix() @ other.translation + self.translation
        return RigidParams(q, t)

    def inverse(self) -> "RigidParams":
        qc = quat_conjugate(self.quaternion)
        qc = qc / np.linalg.norm(qc)
        Rt = quat_to_matrix(qc)
        return RigidParams(qc, -(Rt @ self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        R = self.rotation_matrix()
        return points @ R.T + self.translation


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle mesh with vertex positions in meters."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        f = np.asarray(self.faces, dtype=np.int64)
        if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
            raise ValidationError(f"faces must have shape (n, 3), got {f.shape}")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise ValidationError("face indices out of vertex range")
        f = np.ascontiguousarray(f)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


def drop_degenerate_faces(vertices, faces, eps=1e-12):
    """Remove faces whose triangle area vanishes (used on mesh load)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    a = v[f[:, 1]] - v[f[:, 0]]
    b = v[f[:, 2]] - v[f[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    return f[area2 > eps]


def apply_rigid(cloud: PointCloud, theta: RigidParams) -> PointCloud:
    """Rotate then translate every point: p' = R(q) p + t."""
    return cloud.with_points(theta.transform(cloud.points))


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One point per occupied voxel, placed at the voxel's centroid.

    Output order follows the lexicographic order of the voxel indices, which
    makes the operation deterministic and idempotent.
    """
    if leaf <= 0.0:
        raise ValidationError(f"voxel leaf must be positive, got {leaf}")
    pts = cloud.points
    origin = pts.min(axis=0)
    keys = np.floor((pts - origin) / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]
    return cloud.with_points(centroids)


def nearest_neighbor_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distance from each query point to its nearest reference point."""
    tree = cKDTree(np.asarray(reference, dtype=np.float64))
    d, _ = tree.query(np.asarray(query, dtype=np.float64))
    return d


def mean_nn_distance(query, reference) -> float:
    return float(nearest_neighbor_distances(query, reference).mean())

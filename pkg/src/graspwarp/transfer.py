"""Grasp descriptors and their movement between canonical and observed space.

A grasping motion is an ordered sequence of 6D control poses. Poses ride
deformation fields in both directions: forward into an observed instance by
warping positions and frame axes through the field, and backward into the
canonical frame through a kernel-weighted inverse of the displacement. A
small ridge regressor maps latent shape coordinates to canonical-space
descriptors, which is how grasping knowledge accumulated from many instances
is replayed on a novel one.
"""

import json
from dataclasses import dataclass

import numpy as np

from .cpd import DeformationField, apply_deformation, kernel_matrix
from .errors import DegenerateDeformationError, NumericalError, ValidationError
from .geometry import (
    PointCloud,
    RigidParams,
    gram_schmidt_frame,
    matrix_to_quat,
    quat_to_matrix,
)
from .latent import LatentVector

CANONICAL = "canonical"
OBSERVED = "observed"

_POSE_WIDTH = 7  # 3 position + 4 quaternion entries per flattened pose


@dataclass(frozen=True)
class ControlPose:
    """A 6D pose (position + orthonormal orientation) with a phase label."""

    position: np.ndarray
    orientation: np.ndarray
    label: str = ""

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        R = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        if not (np.isfinite(p).all() and np.isfinite(R).all()):
            raise ValidationError("pose entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError("orientation must be orthonormal with determinant +1")
        p.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", R)

    @classmethod
    def from_quaternion(cls, position, quaternion, label="") -> "ControlPose":
        return cls(position, quat_to_matrix(quaternion), label)

    @property
    def quaternion(self) -> np.ndarray:
        """Scalar-first unit quaternion (w >= 0) of the orientation."""
        return matrix_to_quat(self.orientation)


@dataclass(frozen=True)
class GraspDescriptor:
    """Ordered control poses tagged with the space they live in."""

    poses: tuple
    space_tag: str

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise ValidationError("a grasp descriptor needs at least one pose")
        if self.space_tag not in (CANONICAL, OBSERVED):
            raise ValidationError(f"space_tag must be canonical|observed, got {self.space_tag!r}")
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class DescriptorRegressor:
    """Linear map from latent coordinates to a flattened grasp descriptor."""

    weights: np.ndarray  # (q + 1, k), bias row last
    ridge: float
    labels: tuple
    residual: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != _POSE_WIDTH * len(self.labels):
            raise ValidationError(
                f"weights must have shape (q+1, {_POSE_WIDTH * len(self.labels)}), got {w.shape}"
            )
        if not np.isfinite(w).all():
            raise ValidationError("regressor weights must be finite")
        if self.ridge < 0.0:
            raise ValidationError("ridge must be non-negative")
        w = np.ascontiguousarray(w)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def q(self) -> int:
        return self.weights.shape[0] - 1

    @property
    def pose_count(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SamplingParams:
    """Bounds and spread for constrained random motion generation."""

    max_translation: float = 0.04
    max_angle: float = 0.2
    translation_stddev: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.max_translation <= 0.0 or self.max_angle <= 0.0:
            raise ValidationError("sampling bounds must be positive")
        if self.translation_stddev <= 0.0:
            raise ValidationError("translation_stddev must be positive")


# ---------------------------------------------------------------------------
# pose warping


def _warp_points(field, pts):
    return apply_deformation(field, np.asarray(pts, dtype=np.float64))


def warp_pose(field: DeformationField, theta: RigidParams, pose: ControlPose,
              eps: float = 1e-4) -> ControlPose:
    """Carry a pose through the deformation field and then the rigid move.

    The orientation is warped by displacing the endpoints of the three frame
    axes (position + eps * axis), differencing, and re-orthonormalizing with
    x-then-y Gram-Schmidt; the third axis is their cross product.
    """
    p = pose.position
    R = pose.orientation
    pts = np.vstack([p, p + eps * R[:, 0], p + eps * R[:, 1], p + eps * R[:, 2]])
    warped = _warp_points(field, pts)
    axes = (warped[1:] - warped[0]) / eps
    try:
        frame = gram_schmidt_frame(axes[0], axes[1])
    except ValueError as exc:
        raise DegenerateDeformationError(f"warped frame is degenerate: {exc}") from None
    Rg = theta.rotation_matrix()
    return ControlPose(Rg @ warped[0] + theta.translation, Rg @ frame, pose.label)


def inverse_deform(field: DeformationField, point, support) -> np.ndarray:
    """Pull an observed-space point back to canonical space.

    Approximates the inverse displacement at ``point`` as the kernel-weighted
    negative of the forward displacements of the support points, where the
    kernel compares ``point`` against the *deformed* support positions.
    """
    o = np.asarray(point, dtype=np.float64).reshape(3)
    Z = support.points if isinstance(support, PointCloud) else np.asarray(support, np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValidationError("support must contain at least one point")
    disp = _warp_points(field, Z) - Z
    deformed = Z + disp
    w = kernel_matrix(o[None, :], deformed, field.beta)[0]
    total = w.sum()
    if total < 1e-12:
        raise DegenerateDeformationError(
            "query point is too far from every deformed support point"
        )
    v_inv = -(w @ disp) / total
    return o + v_inv


def _default_support(field: DeformationField, o, k: int = 50) -> np.ndarray:
    """The k canonical points whose deformed positions are nearest to o."""
    pts = field.canonical.points
    deformed = _warp_points(field, pts)
    d2 = np.einsum("ij,ij->i", deformed - o, deformed - o)
    k = min(k, pts.shape[0])
    idx = np.argpartition(d2, k - 1)[:k]
    return pts[np.sort(idx)]


def pose_to_canonical(field: DeformationField, pose: ControlPose, support=None,
                      k: int = 50, eps: float = 1e-4) -> ControlPose:
    """Map an observed-space pose into canonical space.

    Position and axis endpoints go through the kernel-weighted inverse
    displacement; the frame is then re-orthonormalized. When no support set
    is given, the k canonical points deforming closest to the pose are used.
    """
    if support is None:
        support = _default_support(field, pose.position, k)
    p = pose.position
    R = pose.orientation
    origin = inverse_deform(field, p, support)
    endpoints = [inverse_deform(field, p + eps * R[:, i], support) for i in range(3)]
    axes = [(e - origin) / eps for e in endpoints]
    try:
        frame = gram_schmidt_frame(axes[0], axes[1])
    except ValueError as exc:
        raise DegenerateDeformationError(f"inverse-warped frame is degenerate: {exc}") from None
    return ControlPose(origin, frame, pose.label)


# ---------------------------------------------------------------------------
# constrained sampling


def random_quaternion(u1: float, u2: float, u3: float) -> np.ndarray:
    """Uniform random rotation from three uniform [0, 1] samples.

    Subgroup-algorithm construction; returns the quaternion as
    (sin(2 pi u2) r1, cos(2 pi u2) r1, sin(2 pi u3) r2, cos(2 pi u3) r2)
    with r1 = sqrt(1 - u1), r2 = sqrt(u1) and the scalar part last.
    """
    for name, u in (("u1", u1), ("u2", u2), ("u3", u3)):
        if not (0.0 <= u <= 1.0):
            raise ValidationError(f"{name} must lie in [0, 1], got {u}")
    r1 = np.sqrt(1.0 - u1)
    r2 = np.sqrt(u1)
    t2 = 2.0 * np.pi * u2
    t3 = 2.0 * np.pi * u3
    return np.array([np.sin(t2) * r1, np.cos(t2) * r1, np.sin(t3) * r2, np.cos(t3) * r2])


def _xyzw_to_wxyz(q):
    return np.array([q[3], q[0], q[1], q[2]])


def _bounded_rotation_offset(rng, max_angle: float) -> np.ndarray:
    """Scalar-first quaternion, uniform on rotations with angle <= max_angle.

    For an unconstrained bound this is a plain uniform draw; otherwise the
    axis is uniform on the sphere and the angle follows the uniform-rotation
    angle density truncated at the bound (inverse-CDF via Newton), which is
    the same law rejection sampling would produce but terminates for
    arbitrarily tight bounds.
    """
    if max_angle >= np.pi:
        return _xyzw_to_wxyz(random_quaternion(*rng.random(3)))
    u_angle, u_z, u_phi = rng.random(3)
    theta = _invert_angle_cdf(u_angle, max_angle)
    z = 2.0 * u_z - 1.0
    phi = 2.0 * np.pi * u_phi
    s = np.sqrt(max(1.0 - z * z, 0.0))
    axis = np.array([s * np.cos(phi), s * np.sin(phi), z])
    h = 0.5 * theta
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def _invert_angle_cdf(u: float, max_angle: float) -> float:
    """Solve t - sin(t) = u * (a - sin(a)) for t in [0, a]."""
    target = u * (max_angle - np.sin(max_angle))
    t = min((6.0 * target) ** (1.0 / 3.0), max_angle)  # t - sin t ~ t^3 / 6
    for _ in range(50):
        f = t - np.sin(t) - target
        df = 1.0 - np.cos(t)
        if df <= 1e-300:
            break
        step = f / df
        t = min(max(t - step, 0.0), max_angle)
        if abs(step) < 1e-14:
            break
    return t


def sample_grasp_motion(canonical_motion: GraspDescriptor, params: SamplingParams,
                        rng=None) -> GraspDescriptor:
    """Randomize a motion around its control poses within hard bounds.

    Per pose, the translation offset is drawn per-component from a normal
    distribution and redrawn until its norm respects max_translation; the
    rotation offset is uniform over rotations within max_angle. Deterministic
    for a fixed seed.
    """
    if rng is None:
        rng = np.random.default_rng(params.seed)
    out = []
    for pose in canonical_motion.poses:
        for _attempt in range(10_000):
            delta = rng.normal(0.0, params.translation_stddev, 3)
            if np.linalg.norm(delta) <= params.max_translation:
                break
        else:
            raise ValidationError(
                "translation sampling kept violating max_translation after 10000 draws; "
                "bounds and stddev are inconsistent"
            )
        q_off = _bounded_rotation_offset(rng, params.max_angle)
        out.append(
            ControlPose(pose.position + delta, quat_to_matrix(q_off) @ pose.orientation,
                        pose.label)
        )
    return GraspDescriptor(tuple(out), canonical_motion.space_tag)


def filter_constraints(descriptor: GraspDescriptor, predicates) -> bool:
    """True iff every pose satisfies every predicate."""
    return all(pred(pose) for pose in descriptor.poses for pred in predicates)


def axis_cone_predicate(reference_axis, max_angle: float, column: int = 2):
    """Predicate factory: pose axis ``column`` within max_angle of a direction."""
    ref = np.asarray(reference_axis, dtype=np.float64)
    ref = ref / np.linalg.norm(ref)

    def predicate(pose: ControlPose) -> bool:
        axis = pose.orientation[:, column]
        return float(axis @ ref) >= np.cos(max_angle)

    return predicate


# ---------------------------------------------------------------------------
# latent -> descriptor regression


def flatten_descriptor(descriptor: GraspDescriptor, reference: GraspDescriptor | None = None):
    """Flatten to per-pose [position, quaternion]; quaternions are flipped
    onto the hemisphere of the reference descriptor when one is given."""
    parts = []
    for j, pose in enumerate(descriptor.poses):
        quat = pose.quaternion
        if reference is not None:
            ref_q = reference.poses[j].quaternion
            if float(quat @ ref_q) < 0.0:
                quat = -quat
        parts.append(np.concatenate([pose.position, quat]))
    return np.concatenate(parts)


def unflatten_descriptor(flat, labels, space_tag: str) -> GraspDescriptor:
    flat = np.asarray(flat, dtype=np.float64).reshape(len(labels), _POSE_WIDTH)
    poses = []
    for row, label in zip(flat, labels):
        quat = row[3:]
        norm = np.linalg.norm(quat)
        if norm < 1e-12:
            raise NumericalError("predicted quaternion collapsed to zero")
        poses.append(ControlPose.from_quaternion(row[:3], quat / norm, label))
    return GraspDescriptor(tuple(poses), space_tag)


def train_regressor(latents, descriptors, ridge: float = 0.0) -> DescriptorRegressor:
    """Least squares (with bias, optional ridge on the non-bias rows) from
    latent coordinates to flattened canonical-space descriptors."""
    latents = [x.values if isinstance(x, LatentVector) else np.asarray(x, np.float64)
               for x in latents]
    descriptors = list(descriptors)
    if len(latents) != len(descriptors):
        raise ValidationError("need one descriptor per latent vector")
    if len(latents) < 2:
        raise ValidationError("need at least two training pairs")
    lengths = {len(d) for d in descriptors}
    if len(lengths) != 1:
        raise ValidationError(f"descriptors have mixed pose counts: {sorted(lengths)}")
    tags = {d.space_tag for d in descriptors}
    if tags != {CANONICAL}:
        raise ValidationError(f"all descriptors must be canonical-space, got tags {sorted(tags)}")
    if ridge < 0.0:
        raise ValidationError("ridge must be non-negative")
    q = latents[0].shape[0]
    X = np.column_stack([np.vstack(latents), np.ones(len(latents))])
    Yt = np.vstack([flatten_descriptor(d, reference=descriptors[0]) for d in descriptors])
    if ridge > 0.0:
        # augment with sqrt(ridge) rows penalizing everything but the bias
        penalty = np.sqrt(ridge) * np.eye(q + 1)[:q]
        X_aug = np.vstack([X, penalty])
        Y_aug = np.vstack([Yt, np.zeros((q, Yt.shape[1]))])
    else:
        X_aug, Y_aug = X, Yt
    B, *_ = np.linalg.lstsq(X_aug, Y_aug, rcond=None)
    residual = float(np.linalg.norm(X @ B - Yt))
    labels = tuple(p.label for p in descriptors[0].poses)
    return DescriptorRegressor(B, ridge, labels, residual)


def infer_descriptor(regressor: DescriptorRegressor, x) -> GraspDescriptor:
    """Predict a canonical-space descriptor; quaternions are renormalized."""
    xv = x.values if isinstance(x, LatentVector) else np.asarray(x, dtype=np.float64)
    if xv.shape[0] != regressor.q:
        raise ValidationError(f"expected {regressor.q} latent coordinates, got {xv.shape[0]}")
    flat = np.concatenate([xv, [1.0]]) @ regressor.weights
    return unflatten_descriptor(flat, regressor.labels, CANONICAL)


# ---------------------------------------------------------------------------
# space changes


def descriptor_to_observed(descriptor: GraspDescriptor, field: DeformationField,
                           theta: RigidParams) -> GraspDescriptor:
    """Warp every control pose of a canonical-space descriptor into the
    observed space."""
    if descriptor.space_tag != CANONICAL:
        raise ValidationError("descriptor_to_observed expects a canonical-space descriptor")
    poses = tuple(warp_pose(field, theta, pose) for pose in descriptor.poses)
    return GraspDescriptor(poses, OBSERVED)


def descriptor_to_canonical(descriptor: GraspDescriptor, field: DeformationField,
                            k: int = 50) -> GraspDescriptor:
    """Pull every control pose of an observed-space descriptor back into the
    canonical space."""
    if descriptor.space_tag != OBSERVED:
        raise ValidationError("descriptor_to_canonical expects an observed-space descriptor")
    poses = tuple(pose_to_canonical(field, pose, k=k) for pose in descriptor.poses)
    return GraspDescriptor(poses, CANONICAL)


def to_robot_frame(descriptor: GraspDescriptor, object_pose: RigidParams) -> GraspDescriptor:
    """Premultiply every pose by the object pose w.r.t. the manipulator base."""
    if descriptor.space_tag != OBSERVED:
        raise ValidationError("to_robot_frame expects an observed-space descriptor")
    R = object_pose.rotation_matrix()
    poses = tuple(
        ControlPose(R @ p.position + object_pose.translation, R @ p.orientation, p.label)
        for p in descriptor.poses
    )
    return GraspDescriptor(poses, OBSERVED)


# ---------------------------------------------------------------------------
# serialization


def descriptor_to_dict(descriptor: GraspDescriptor) -> dict:
    return {
        "space_tag": descriptor.space_tag,
        "poses": [
            {
                "label": pose.label,
                "position": [float(v) for v in pose.position],
                "quaternion": [float(v) for v in pose.quaternion],
            }
            for pose in descriptor.poses
        ],
    }


def descriptor_from_dict(doc: dict) -> GraspDescriptor:
    try:
        poses = tuple(
            ControlPose.from_quaternion(
                np.asarray(p["position"], dtype=np.float64),
                np.asarray(p["quaternion"], dtype=np.float64),
                p.get("label", ""),
            )
            for p in doc["poses"]
        )
        return GraspDescriptor(poses, doc["space_tag"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed grasp descriptor document: {exc}") from None


def save_descriptor(descriptor: GraspDescriptor, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(descriptor_to_dict(descriptor), fh, indent=2)
        fh.write("\n")


def load_descriptor(path) -> GraspDescriptor:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return descriptor_from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None

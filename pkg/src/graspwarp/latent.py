"""Low-dimensional linear spaces over deformation-field weight matrices.

Each training deformation is flattened to a row vector, rows are stacked and
column-normalized into a design matrix, and an EM loop recovers the dominant
linear subspace. Points of that subspace decode back into full deformation
fields, so moving linearly in the latent space interpolates between training
deformations.
"""

from dataclasses import dataclass

import numpy as np

from .cpd import DeformationField
from .errors import NumericalError, ValidationError
from .geometry import PointCloud

_D = 3


@dataclass(frozen=True)
class Normalization:
    """Per-column shift/scale used to whiten the design matrix."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ValidationError("mean and std must have equal length")
        if (std <= 0.0).any():
            raise ValidationError("std entries must be positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class LatentSpace:
    """q independent component rows spanning the deformation subspace."""

    components: np.ndarray  # (q, p)
    normalization: Normalization
    explained_variance: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.components, dtype=np.float64)
        ev = np.asarray(self.explained_variance, dtype=np.float64).reshape(-1)
        if L.ndim != 2:
            raise ValidationError("components must be a 2-D matrix")
        q, p = L.shape
        if q < 1 or q > p:
            raise ValidationError(f"need 1 <= q <= p, got q={q}, p={p}")
        if p != self.normalization.mean.shape[0]:
            raise ValidationError("components width disagrees with normalization length")
        if ev.shape[0] != q:
            raise ValidationError("explained_variance must have one entry per component")
        if np.linalg.matrix_rank(L) < q:
            raise ValidationError("component rows must be linearly independent")
        L = np.ascontiguousarray(L)
        L.setflags(write=False)
        ev.setflags(write=False)
        object.__setattr__(self, "components", L)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def q(self) -> int:
        return self.components.shape[0]

    @property
    def p(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class LatentVector:
    """Dimensionless coordinates of one deformation in a LatentSpace."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ValidationError("latent coordinates must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


def flatten_field(field: DeformationField) -> np.ndarray:
    """Row-major flattening of the weight matrix into a length-3M vector."""
    return field.weights.reshape(-1).copy()


def unflatten_weights(y, n_points: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n_points * _D:
        raise ValidationError(f"expected a length-{n_points * _D} vector, got {y.shape[0]}")
    return y.reshape(n_points, _D)


def build_design_matrix(fields) -> tuple[np.ndarray, Normalization]:
    """Stack flattened fields and whiten each column to zero mean, unit variance.

    Columns with zero variance keep scale one so they contribute nothing to
    the learned subspace. All fields must share the same template cloud size
    and kernel width.
    """
    fields = list(fields)
    if len(fields) < 2:
        raise ValidationError("need at least two deformation fields")
    m = len(fields[0].canonical)
    beta = fields[0].beta
    for i, f in enumerate(fields):
        if len(f.canonical) != m:
            raise ValidationError(
                f"field {i} has {len(f.canonical)} template points, expected {m}"
            )
        if f.beta != beta:
            raise ValidationError(f"field {i} has kernel width {f.beta}, expected {beta}")
    raw = np.vstack([flatten_field(f) for f in fields])
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    # columns whose spread is at rounding level count as constant
    degenerate = std <= np.abs(mean) * 1e-12 + 1e-300
    std = np.where(degenerate, 1.0, std)
    Y = (raw - mean) / std
    Y[:, degenerate] = 0.0
    return Y, Normalization(mean, std)


def pca_em(Y: np.ndarray, q: int, max_iters: int = 500, tol: float = 1e-9, seed: int = 0):
    """EM iteration for the dominant q-dimensional row subspace of Y.

    Alternates X = Y L'(L L')^-1 and L = (X'X)^-1 X'Y from a seeded random
    start until the relative change of |Y - X L|_F drops below ``tol``.
    Restarts with a fresh random matrix (up to 3 times) when an iterate
    becomes singular.
    """
    Y = np.asarray(Y, dtype=np.float64)
    n, p = Y.shape
    if not (1 <= q <= min(n - 1, p)):
        raise ValidationError(f"q must satisfy 1 <= q <= min(n-1, p) = {min(n - 1, p)}, got {q}")
    rng = np.random.default_rng(seed)
    for _restart in range(4):
        L = rng.standard_normal((q, p))
        prev_err = None
        failed = False
        for _iteration in range(max_iters):
            try:
                X = np.linalg.solve(L @ L.T, L @ Y.T).T
                L = np.linalg.solve(X.T @ X, X.T @ Y)
            except np.linalg.LinAlgError:
                failed = True
                break
            if not np.isfinite(L).all():
                failed = True
                break
            err = np.linalg.norm(Y - X @ L)
            if prev_err is not None and abs(prev_err - err) <= tol * max(prev_err, 1e-300):
                break
            prev_err = err
        if not failed:
            return L
    raise NumericalError("subspace iteration kept collapsing after 3 restarts")


def choose_q(Y: np.ndarray, variance_fraction: float = 0.95) -> int:
    """Smallest q whose top singular values capture the requested variance."""
    if not (0.0 < variance_fraction <= 1.0):
        raise ValidationError(f"variance_fraction must lie in (0, 1], got {variance_fraction}")
    s = np.linalg.svd(np.asarray(Y, dtype=np.float64), compute_uv=False)
    power = s * s
    total = power.sum()
    if total == 0.0:
        return 1
    frac = np.cumsum(power) / total
    return int(np.searchsorted(frac, variance_fraction - 1e-12) + 1)


def principal_space(Y: np.ndarray, L: np.ndarray, normalization: Normalization) -> LatentSpace:
    """Rotate an EM basis onto variance-ordered principal component rows.

    Component rows are the principal directions scaled by the per-component
    standard deviation over the training rows, so encoded coordinates come
    out dimensionless and roughly unit scale regardless of the data spread.
    """
    Qp, _ = np.linalg.qr(L.T)  # (p, q), orthonormal columns spanning row space
    Xp = Y @ Qp
    U, S, Vt = np.linalg.svd(Xp, full_matrices=False)
    directions = Vt @ Qp.T
    # deterministic sign: largest-magnitude entry of each direction is positive
    for row in range(directions.shape[0]):
        j = int(np.argmax(np.abs(directions[row])))
        if directions[row, j] < 0.0:
            directions[row] = -directions[row]
    explained = (S * S) / Y.shape[0]
    scales = np.sqrt(explained)
    scales = np.where(scales > 0.0, scales, 1.0)
    return LatentSpace(scales[:, None] * directions, normalization, explained)


def fit_latent_space(
    fields,
    variance_fraction: float = 0.95,
    q: int | None = None,
    max_iters: int = 500,
    tol: float = 1e-9,
    seed: int = 0,
) -> LatentSpace:
    """Build the whitened design matrix and extract its dominant subspace."""
    Y, norm = build_design_matrix(fields)
    if not np.any(Y):
        # all training deformations identical: a single inert component
        p = Y.shape[1]
        L = np.zeros((1, p))
        L[0, 0] = 1.0
        return LatentSpace(L, norm, np.zeros(1))
    if q is None:
        q = choose_q(Y, variance_fraction)
    q = min(q, Y.shape[0] - 1, Y.shape[1])
    L = pca_em(Y, q, max_iters=max_iters, tol=tol, seed=seed)
    return principal_space(Y, L, norm)


def _as_vector(x) -> np.ndarray:
    if isinstance(x, LatentVector):
        return x.values
    return np.asarray(x, dtype=np.float64).reshape(-1)


def encode(field_or_row, space: LatentSpace) -> LatentVector:
    """Project a deformation onto the latent space: x = y L'(L L')^-1.

    Accepts either a DeformationField (flattened and whitened internally) or
    an already-whitened row vector.
    """
    if isinstance(field_or_row, DeformationField):
        y = space.normalization.apply(flatten_field(field_or_row))
    else:
        y = np.asarray(field_or_row, dtype=np.float64).reshape(-1)
    if y.shape[0] != space.p:
        raise ValidationError(f"expected a length-{space.p} vector, got {y.shape[0]}")
    L = space.components
    x = np.linalg.solve(L @ L.T, L @ y)
    return LatentVector(x)


def decode_weights(x, space: LatentSpace) -> np.ndarray:
    """Map latent coordinates to a raw (M, 3) weight matrix: y = x L, then
    un-whiten and reshape. The zero vector decodes to the mean training
    deformation."""
    xv = _as_vector(x)
    if xv.shape[0] != space.q:
        raise ValidationError(f"expected {space.q} latent coordinates, got {xv.shape[0]}")
    y = space.normalization.invert(xv @ space.components)
    return unflatten_weights(y, y.shape[0] // _D)


def decode(x, space: LatentSpace, canonical: PointCloud, beta: float) -> DeformationField:
    """Latent coordinates to a full deformation field over ``canonical``."""
    W = decode_weights(x, space)
    if W.shape[0] != len(canonical):
        raise ValidationError(
            f"latent space is {W.shape[0]} points wide but canonical has {len(canonical)}"
        )
    return DeformationField(canonical, W, beta)

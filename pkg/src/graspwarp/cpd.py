"""Coherent-point-drift style non-rigid registration.

A template cloud is treated as the centroids of a Gaussian mixture and
deformed towards a reference cloud by an EM loop. The displacement of any
query point z is a kernel-weighted combination of per-template-point weight
vectors, v(z) = sum_i g(z, c_i) W_i, so the fitted field extends to points
that were never part of either cloud.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateDeformationError, NumericalError, ValidationError
from .geometry import PointCloud

log = logging.getLogger(__name__)

_D = 3


@dataclass(frozen=True)
class CpdParams:
    """Registration parameters.

    beta is the kernel width steering how far displacements correlate, lam
    trades data fit against field smoothness, sigma2 is the mixture variance
    in squared meters, and omega the weight of the uniform outlier component.
    sigma2 stays fixed unless update_sigma2 is set.
    """

    beta: float = 1.0
    lam: float = 3.0
    sigma2: float = 0.01
    omega: float = 0.1
    max_iters: int = 150
    tol: float = 1e-5
    update_sigma2: bool = False

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if self.lam <= 0.0:
            raise ValidationError(f"lam must be positive, got {self.lam}")
        if self.sigma2 <= 0.0:
            raise ValidationError(f"sigma2 must be positive, got {self.sigma2}")
        if not (0.0 <= self.omega < 1.0):
            raise ValidationError(f"omega must lie in [0, 1), got {self.omega}")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.tol <= 0.0:
            raise ValidationError("tol must be positive")


@dataclass(frozen=True)
class DeformationField:
    """Non-rigid transform determined by (canonical cloud, beta, weights)."""

    canonical: PointCloud
    weights: np.ndarray
    beta: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.canonical), _D):
            raise ValidationError(
                f"weights must have shape ({len(self.canonical)}, {_D}), got {w.shape}"
            )
        if not np.isfinite(w).all():
            raise ValidationError("weights contain non-finite entries")
        if self.beta <= 0.0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        w = np.ascontiguousarray(w)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def identity(cls, canonical: PointCloud, beta: float) -> "DeformationField":
        return cls(canonical, np.zeros((len(canonical), _D)), beta)


def _points_of(obj):
    return obj.points if isinstance(obj, PointCloud) else np.asarray(obj, dtype=np.float64)


def kernel_matrix(a, b, beta: float) -> np.ndarray:
    """Gaussian kernel matrix g_ij = exp(-|a_i - b_j|^2 / (2 beta^2))."""
    if beta <= 0.0:
        raise ValidationError(f"beta must be positive, got {beta}")
    return _kernels.kernel_matrix(_points_of(a), _points_of(b), beta)


def apply_deformation(field: DeformationField, query):
    """Displace arbitrary query points through the field.

    Accepts a PointCloud or an (n, 3) array and returns the same kind.
    """
    pts = _points_of(query)
    moved = pts + kernel_matrix(pts, field.canonical, field.beta) @ field.weights
    if isinstance(query, PointCloud):
        return query.with_points(moved)
    return moved


def outlier_constant(omega: float, sigma2: float, n_observed: int) -> float:
    """Constant added to each responsibility denominator for the uniform
    outlier component."""
    if omega == 0.0:
        return 0.0
    return omega / (1.0 - omega) * (2.0 * np.pi * sigma2) ** (_D / 2.0) / n_observed


def e_step(canonical, observed, weights, params: CpdParams, G=None) -> np.ndarray:
    """Posterior responsibility matrix P (template x reference).

    Column n holds the responsibilities of every deformed template point for
    reference point n; with omega = 0 each column sums to one.
    """
    C = _points_of(canonical)
    X = _points_of(observed)
    if weights is None:
        deformed = C
    else:
        if G is None:
            G = kernel_matrix(C, C, params.beta)
        deformed = C + G @ weights
    return _kernels.posteriors(
        deformed, X, params.sigma2, outlier_constant(params.omega, params.sigma2, X.shape[0])
    )


def m_step(G, P, canonical, observed, params: CpdParams) -> np.ndarray:
    """Solve the coherence-regularized weighted least squares for W.

    (G + lam sigma2 d(P1)^-1) W = d(P1)^-1 P X - C. A template point with zero
    total responsibility makes the system undefined and raises; callers can
    retry after jittering the responsibilities.
    """
    C = _points_of(canonical)
    X = _points_of(observed)
    p1 = P.sum(axis=1)
    if (p1 < 1e-300).any():
        bad = int(np.argmin(p1))
        raise DegenerateDeformationError(
            f"template point {bad} has zero total responsibility; correspondence is "
            "degenerate (consider adding jitter to the responsibilities)"
        )
    dinv = 1.0 / p1
    A = G + params.lam * params.sigma2 * np.diag(dinv)
    rhs = dinv[:, None] * (P @ X) - C
    try:
        W = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        log.debug("m_step system singular; retrying with 1e-9 diagonal jitter")
        A[np.diag_indices_from(A)] += 1e-9
        W = np.linalg.solve(A, rhs)
    if not np.isfinite(W).all():
        raise NumericalError("m_step produced non-finite weights")
    return W


def energy(canonical, observed, weights, sigma2: float, G=None, beta: float | None = None) -> float:
    """Data alignment energy: -sum_n log sum_m exp(-|x_n - T(c_m)|^2 / (2 sigma2))."""
    if sigma2 <= 0.0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    C = _points_of(canonical)
    X = _points_of(observed)
    if weights is None:
        deformed = C
    else:
        if G is None:
            if beta is None:
                raise ValidationError("energy needs either G or beta to deform the template")
            G = kernel_matrix(C, C, beta)
        deformed = C + G @ weights
    return _kernels.mixture_energy(deformed, X, sigma2, model_outer=False)


def regularized_energy(G, W, data_energy: float, lam: float) -> float:
    """Data energy plus the smoothness penalty (lam / 2) tr(W' G W)."""
    return data_energy + 0.5 * lam * float(np.sum(W * (G @ W)))


def register(canonical: PointCloud, target: PointCloud, params: CpdParams | None = None):
    """Fit a deformation field pulling ``canonical`` onto ``target``.

    Both clouds are expected to be pre-aligned to the category's canonical
    pose. Returns (field, final_sigma2, trace) where ``trace`` holds the
    regularized objective after every M-step; it is non-increasing after the
    first recorded value (up to tiny slack) for fixed sigma2.
    """
    if params is None:
        params = CpdParams()
    C = canonical.points
    X = target.points
    G = kernel_matrix(C, C, params.beta)
    W = np.zeros((C.shape[0], _D))
    sigma2 = params.sigma2
    trace: list[float] = []
    prev = None
    for iteration in range(params.max_iters):
        deformed = C + G @ W
        P = _kernels.posteriors(
            deformed, X, sigma2, outlier_constant(params.omega, sigma2, X.shape[0])
        )
        W = m_step(G, P, C, X, params)
        if params.update_sigma2:
            sigma2 = _sigma2_update(P, C + G @ W, X)
        f = regularized_energy(G, W, energy(C, X, W, sigma2, G=G), params.lam)
        if not np.isfinite(f):
            raise NumericalError(
                f"registration energy became non-finite at iteration {iteration}; "
                "sigma2 is likely too small for the data scale"
            )
        trace.append(f)
        if prev is not None and abs(prev - f) < params.tol:
            break
        prev = f
    field = DeformationField(canonical, W, params.beta)
    log.debug("register: %d iterations, final objective %.6g", len(trace), trace[-1])
    return field, sigma2, trace


def field_to_dict(field: DeformationField) -> dict:
    """Wire format of a deformation field: canonical points, kernel width,
    and the weight matrix as base64 row-major float64."""
    import base64

    def pack(arr):
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        return {"shape": list(arr.shape), "b64": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")}

    return {
        "canonical": pack(field.canonical.points),
        "frame_id": field.canonical.frame_id,
        "beta": field.beta,
        "weights": pack(field.weights),
    }


def field_from_dict(doc: dict) -> DeformationField:
    import base64

    def unpack(entry):
        data = np.frombuffer(base64.b64decode(entry["b64"]), dtype="<f8")
        return data.reshape(entry["shape"]).astype(np.float64)

    canonical = PointCloud(unpack(doc["canonical"]), doc.get("frame_id", ""))
    return DeformationField(canonical, unpack(doc["weights"]), doc["beta"])


def _sigma2_update(P, deformed, X):
    """Standard mixture-variance re-estimate from the current responsibilities."""
    np_total = P.sum()
    if np_total <= 0.0:
        raise DegenerateDeformationError("all responsibilities vanished")
    pt1 = P.sum(axis=0)
    p1 = P.sum(axis=1)
    sq = (
        float(pt1 @ np.einsum("ij,ij->i", X, X))
        - 2.0 * float(np.sum((P @ X) * deformed))
        + float(p1 @ np.einsum("ij,ij->i", deformed, deformed))
    )
    return max(sq / (np_total * _D), 1e-12)

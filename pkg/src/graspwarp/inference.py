"""Fit latent shape coordinates and a rigid alignment to an observed cloud.

The fitted deformation is constrained to the learned category subspace, so a
partial view still pins down the full shape: decoding the fitted coordinates
over the whole template completes regions the sensor never saw.
"""

import json
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .cpd import kernel_matrix
from .errors import NumericalError, ValidationError
from .geometry import PointCloud, RigidParams, apply_rigid, quat_to_matrix
from .latent import LatentSpace, LatentVector, decode_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceParams:
    """Gradient-descent settings for the shape fit.

    ``model_outer`` picks the reduction orientation of the energy: True sums
    the log terms over template points (each template point seeks nearby
    data), False sums over observed points, which is the robust choice for
    heavily occluded views.
    """

    sigma2: float = 0.01
    max_iters: int = 200
    grad_tol: float = 1e-5
    energy_tol: float = 1e-8
    step_init: float = 1.0
    step_growth: float = 2.0
    armijo_c: float = 1e-4
    max_backtracks: int = 60
    init_theta: RigidParams = dc_field(default_factory=RigidParams.identity)
    model_outer: bool = True
    sigma2_schedule: tuple = ()
    n_starts: int = 1
    start_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma2 <= 0.0:
            raise ValidationError(f"sigma2 must be positive, got {self.sigma2}")
        if any(s <= 0.0 for s in self.sigma2_schedule):
            raise ValidationError("sigma2_schedule entries must be positive")
        if self.max_iters < 1 or self.n_starts < 1:
            raise ValidationError("max_iters and n_starts must be >= 1")

    def stages(self) -> tuple:
        """Variance stages run coarse-to-fine with warm starts."""
        return tuple(self.sigma2_schedule) or (self.sigma2,)


@dataclass
class ShapeFit:
    """Result of the joint latent + rigid optimization."""

    x: LatentVector
    theta: RigidParams
    final_energy: float
    iterations: int
    converged: bool
    energy_trace: list = dc_field(default_factory=list, repr=False)


def _model_parts(model):
    canonical = model.canonical
    space: LatentSpace = model.latent
    beta = model.cpd_params.beta
    return canonical, space, beta


def _deformed_template(canonical, space, x, G):
    W = decode_weights(x, space)
    return canonical.points + G @ W


# Partial derivatives of the rotation matrix w.r.t. the four quaternion
# components, evaluated at a unit quaternion (w, x, y, z).
def _rotation_jacobian(u):
    w, x, y, z = u
    dw = 2.0 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2.0 * np.array([[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]])
    dy = 2.0 * np.array([[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]])
    dz = 2.0 * np.array([[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]])
    return dw, dx, dy, dz


def energy_latent(x, theta: RigidParams, model, observed: PointCloud,
                  sigma2: float = 0.01, model_outer: bool = True, G=None) -> float:
    """Alignment energy of the decoded-and-rigidly-moved template against
    the observed cloud (lower is better)."""
    canonical, space, beta = _model_parts(model)
    if len(observed) < 1:
        raise ValidationError("observed cloud is empty")
    if G is None:
        G = kernel_matrix(canonical, canonical, beta)
    T = _deformed_template(canonical, space, x, G)
    Y = T @ theta.rotation_matrix().T + theta.translation
    return _kernels.mixture_energy(Y, observed.points, sigma2, model_outer)


def energy_gradient(x, theta: RigidParams, model, observed: PointCloud,
                    sigma2: float = 0.01, model_outer: bool = True, G=None):
    """Analytic gradient of the fit energy.

    Returns (grad_x, grad_theta) with grad_theta ordered as the four
    quaternion components (w, x, y, z) followed by the translation. The
    quaternion is treated as four free parameters; the energy normalizes it
    internally, so the gradient lives in the tangent space of that scaling.
    """
    canonical, space, beta = _model_parts(model)
    if len(observed) < 1:
        raise ValidationError("observed cloud is empty")
    if G is None:
        G = kernel_matrix(canonical, canonical, beta)
    quat = np.asarray(theta.quaternion, dtype=np.float64)
    trans = np.asarray(theta.translation, dtype=np.float64)
    xv = x.values if isinstance(x, LatentVector) else np.asarray(x, dtype=np.float64)
    _, gx, gq, gt, _, _ = _energy_and_gradient(
        xv, quat, trans, canonical, space, G, observed.points, sigma2, model_outer
    )
    return gx, np.concatenate([gq, gt])


def _energy_and_gradient(xv, quat, trans, canonical, space, G, obs, sigma2, model_outer):
    qnorm = np.linalg.norm(quat)
    if qnorm == 0.0:
        raise NumericalError("quaternion collapsed to zero during optimization")
    u = quat / qnorm
    R = quat_to_matrix(u)
    W = decode_weights(xv, space)
    T = canonical.points + G @ W
    Y = T @ R.T + trans
    energy, dY = _kernels.mixture_energy_grad(Y, obs, sigma2, model_outer)
    gt = dY.sum(axis=0)
    dR = dY.T @ T
    jac = _rotation_jacobian(u)
    gu = np.array([float(np.sum(dR * J)) for J in jac])
    gq = (gu - u * (u @ gu)) / qnorm
    dT = dY @ R
    dW = G @ dT  # G is symmetric
    dy_norm = dW.reshape(-1) * space.normalization.std
    gx = space.components @ dy_norm
    return energy, gx, gq, gt, T, u


def _latent_direction_norms(space, G):
    """Squared Frobenius norms of the per-coordinate template velocity fields
    d(deformed template)/dx_j; the Gauss-Newton diagonal for the latent block."""
    q = space.q
    norms = np.empty(q)
    for j in range(q):
        Wj = (space.components[j] * space.normalization.std).reshape(-1, 3)
        norms[j] = float(np.sum((G @ Wj) ** 2))
    return norms


def _preconditioner(latent_norms, T, u, n_points, sigma2):
    """Diagonal Gauss-Newton curvature estimate per parameter, used to rescale
    the descent direction so the latent, quaternion, and translation blocks
    advance at comparable rates."""
    quat_norms = np.array([float(np.sum((T @ J.T) ** 2)) for J in _rotation_jacobian(u)])
    diag = np.concatenate([latent_norms, quat_norms, np.full(3, float(n_points))]) / sigma2
    floor = max(diag.max() * 1e-9, 1e-12)
    return np.maximum(diag, floor)


def _energy_only(xv, quat, trans, canonical, space, G, obs, sigma2, model_outer):
    qnorm = np.linalg.norm(quat)
    if qnorm == 0.0:
        return np.nan
    R = quat_to_matrix(quat / qnorm)
    W = decode_weights(xv, space)
    T = canonical.points + G @ W
    Y = T @ R.T + trans
    return _kernels.mixture_energy(Y, obs, sigma2, model_outer)


def _unpack(vec, q):
    return vec[:q], vec[q : q + 4], vec[q + 4 :]


def infer_shape(model, observed: PointCloud, params: InferenceParams | None = None) -> ShapeFit:
    """Joint gradient descent over latent coordinates and rigid alignment.

    Uses backtracking line search, so the energy never increases across
    accepted steps; the quaternion block is renormalized after every step,
    which leaves the energy unchanged. The observed cloud must already be
    coarsely aligned with the template pose.
    """
    if params is None:
        params = InferenceParams()
    canonical, space, beta = _model_parts(model)
    if len(observed) < 1:
        raise ValidationError("observed cloud is empty")
    G = kernel_matrix(canonical, canonical, beta)
    obs = observed.points
    q = space.q

    latent_norms = _latent_direction_norms(space, G)

    def _value(vec, sigma2):
        xv, quat, trans = _unpack(vec, q)
        return _energy_only(xv, quat, trans, canonical, space, G, obs,
                            sigma2, params.model_outer)

    def _value_grad(vec, sigma2):
        xv, quat, trans = _unpack(vec, q)
        e, gx, gq, gt, T, u = _energy_and_gradient(xv, quat, trans, canonical, space, G, obs,
                                                   sigma2, params.model_outer)
        precond = _preconditioner(latent_norms, T, u, T.shape[0], sigma2)
        return e, np.concatenate([gx, gq, gt]), precond

    def _renorm(vec):
        out = vec.copy()
        out[q : q + 4] /= np.linalg.norm(out[q : q + 4])
        return out

    def run_descent(vec, sigma2):
        e, g, precond = _value_grad(vec, sigma2)
        if not np.isfinite(e):
            raise NumericalError(
                "fit energy is not finite at initialization; sigma2 is inconsistent "
                "with the data scale"
            )
        trace = [e]
        alpha = params.step_init
        converged = False
        iterations = 0
        for iterations in range(1, params.max_iters + 1):
            gnorm = float(np.linalg.norm(g))
            if gnorm < params.grad_tol:
                converged = True
                iterations -= 1
                break
            direction = g / precond
            slope = float(g @ direction)  # positive: direction is a descent direction
            accepted = None
            a = alpha
            for _ in range(params.max_backtracks):
                cand = vec - a * direction
                ec = _value(cand, sigma2)
                if np.isfinite(ec) and ec <= e - params.armijo_c * a * slope:
                    accepted = (cand, a)
                    break
                a *= 0.5
            if accepted is None:
                break
            vec, a = accepted
            vec = _renorm(vec)
            prev_e = e
            e, g, precond = _value_grad(vec, sigma2)
            trace.append(e)
            alpha = min(a * params.step_growth, params.step_init * 1024.0)
            if abs(prev_e - e) < params.energy_tol:
                converged = True
                break
        return vec, e, iterations, converged, trace

    def run_stages(x0):
        vec = np.concatenate([x0, params.init_theta.quaternion, params.init_theta.translation])
        total_iterations = 0
        trace: list[float] = []
        converged = False
        e = np.nan
        for sigma2 in params.stages():
            vec, e, iterations, converged, stage_trace = run_descent(vec, sigma2)
            total_iterations += iterations
            trace.extend(stage_trace)
        return vec, e, total_iterations, converged, trace

    starts = [np.zeros(q)]
    if params.n_starts > 1:
        rng = np.random.default_rng(params.seed)
        starts += [params.start_scale * rng.standard_normal(q) for _ in range(params.n_starts - 1)]

    best = None
    for x0 in starts:
        result = run_stages(x0)
        if best is None or result[1] < best[1]:
            best = result
    vec, e, iterations, converged, trace = best
    xv, quat, trans = _unpack(vec, q)
    fit = ShapeFit(
        x=LatentVector(xv),
        theta=RigidParams(quat / np.linalg.norm(quat), trans),
        final_energy=float(e),
        iterations=iterations,
        converged=converged,
        energy_trace=trace,
    )
    log.debug(
        "infer_shape: %d iterations, energy %.6g, converged=%s",
        fit.iterations, fit.final_energy, fit.converged,
    )
    return fit


def complete_shape(model, fit: ShapeFit) -> PointCloud:
    """Decode the fitted deformation over the full template and move it into
    the observed frame; includes regions unobserved in the input view."""
    canonical, space, beta = _model_parts(model)
    G = kernel_matrix(canonical, canonical, beta)
    deformed = canonical.points + G @ decode_weights(fit.x, space)
    return apply_rigid(PointCloud(deformed, canonical.frame_id), fit.theta)


def fit_to_json(fit: ShapeFit) -> str:
    doc = {
        "x": [float(v) for v in fit.x.values],
        "quaternion": [float(v) for v in fit.theta.quaternion],
        "translation": [float(v) for v in fit.theta.translation],
        "energy": float(fit.final_energy),
        "iterations": int(fit.iterations),
        "converged": bool(fit.converged),
    }
    return json.dumps(doc, indent=2)


def fit_from_json(text: str) -> ShapeFit:
    doc = json.loads(text)
    return ShapeFit(
        x=LatentVector(np.asarray(doc["x"], dtype=np.float64)),
        theta=RigidParams(np.asarray(doc["quaternion"]), np.asarray(doc["translation"])),
        final_energy=float(doc["energy"]),
        iterations=int(doc["iterations"]),
        converged=bool(doc["converged"]),
    )

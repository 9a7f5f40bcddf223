"""Pure-numpy implementations of the hot kernels.

Used as the fallback backend when the compiled extension is unavailable.
All functions expect C-contiguous float64 arrays; the dispatch layer in
``graspwarp._kernels`` takes care of coercion.
"""

import numpy as np

_RAY_CHUNK = 2048


def squared_distances(a, b):
    """Pairwise squared Euclidean distances, shape (len(a), len(b))."""
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    d2 = aa[:, None] + bb[None, :]
    d2 -= 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def kernel_matrix(a, b, beta):
    """Gaussian kernel matrix g_ij = exp(-|a_i - b_j|^2 / (2 beta^2))."""
    d2 = squared_distances(a, b)
    d2 *= -1.0 / (2.0 * beta * beta)
    return np.exp(d2, out=d2)


def posteriors(model, observed, sigma2, outlier):
    """Column-normalized Gaussian responsibilities with a uniform outlier term.

    P[m, n] = exp(-d2_mn/(2 s2)) / (sum_k exp(-d2_kn/(2 s2)) + outlier).
    Shifted by the per-column minimum distance so columns never underflow to
    0/0; with outlier == 0 each column sums to one.
    """
    inv = 1.0 / (2.0 * sigma2)
    d2 = squared_distances(model, observed)
    dmin = d2.min(axis=0)
    num = np.exp((dmin[None, :] - d2) * inv)
    den = num.sum(axis=0)
    if outlier > 0.0:
        with np.errstate(over="ignore"):
            den = den + outlier * np.exp(dmin * inv)
    out = num / den[None, :]
    return out


def mixture_energy(model, observed, sigma2, model_outer):
    """Negative log-sum-exp alignment energy between two point sets.

    ``model_outer=False`` sums over observed points outside the log (each
    observed point seeks a nearby model point); ``model_outer=True`` is the
    transpose reduction.
    """
    e, _ = mixture_energy_grad(model, observed, sigma2, model_outer, want_grad=False)
    return e


def mixture_energy_grad(model, observed, sigma2, model_outer, want_grad=True):
    """Energy plus its gradient with respect to the model points."""
    inv = 1.0 / (2.0 * sigma2)
    d2 = squared_distances(model, observed)
    axis = 1 if model_outer else 0
    dmin = d2.min(axis=axis, keepdims=True)
    e = np.exp((dmin - d2) * inv)
    s = e.sum(axis=axis, keepdims=True)
    energy = float(np.sum(dmin * inv - np.log(s)))
    if not want_grad:
        return energy, None
    w = e / s
    if model_outer:
        # rows of w sum to one
        grad = (model - w @ observed) / sigma2
    else:
        grad = (w.sum(axis=1)[:, None] * model - w @ observed) / sigma2
    return energy, grad


def raycast_first_hit(origins, dirs, vertices, faces):
    """First-hit ray/triangle intersection (Moller-Trumbore).

    Returns (t, tri_index); t is inf and tri_index -1 where a ray misses.
    """
    n_rays = origins.shape[0]
    v0 = vertices[faces[:, 0]]
    edge1 = vertices[faces[:, 1]] - v0
    edge2 = vertices[faces[:, 2]] - v0
    t_best = np.full(n_rays, np.inf)
    idx_best = np.full(n_rays, -1, dtype=np.int64)
    eps = 1e-12
    for start in range(0, n_rays, _RAY_CHUNK):
        sl = slice(start, min(start + _RAY_CHUNK, n_rays))
        o = origins[sl]
        d = dirs[sl]
        pvec = np.cross(d[:, None, :], edge2[None, :, :])
        det = np.einsum("fj,rfj->rf", edge1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_det = np.where(np.abs(det) > eps, 1.0 / det, 0.0)
            tvec = o[:, None, :] - v0[None, :, :]
            u = np.einsum("rfj,rfj->rf", tvec, pvec) * inv_det
            qvec = np.cross(tvec, edge1[None, :, :])
            v = np.einsum("rj,rfj->rf", d, qvec) * inv_det
            t = np.einsum("fj,rfj->rf", edge2, qvec) * inv_det
        hit = (
            (np.abs(det) > eps)
            & (u >= -1e-9)
            & (v >= -1e-9)
            & (u + v <= 1.0 + 1e-9)
            & (t > 1e-9)
        )
        t = np.where(hit, t, np.inf)
        which = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        tmin = t[rows, which]
        better = tmin < t_best[sl]
        t_best[sl] = np.where(better, tmin, t_best[sl])
        idx_best[sl] = np.where(better, which, idx_best[sl])
    return t_best, idx_best

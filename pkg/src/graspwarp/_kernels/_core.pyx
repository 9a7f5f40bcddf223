# cython: language_level=3
"""Compiled kernels: Gaussian kernel matrices, mixture responsibilities,
alignment energies with gradients, and ray/triangle casting.

Semantics match graspwarp._kernels._numpy_impl; results may differ by
floating-point rounding only. Shifted exponents below -745 underflow to an
exact zero in either backend, so those exp calls are skipped outright; the
energy/gradient path prunes at -50 because such terms are lost to rounding
next to the leading term anyway.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, INFINITY

cnp.import_array()

DEF UNDERFLOW_ARG = -745.0
DEF NEGLIGIBLE_ARG = -50.0


def kernel_matrix(const double[:, ::1] a, const double[:, ::1] b, double beta):
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], d = a.shape[1]
    cdef double inv = -1.0 / (2.0 * beta * beta)
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    acc += diff * diff
                out[i, j] = exp(inv * acc)
    return out_arr


def posteriors(const double[:, ::1] model, const double[:, ::1] observed, double sigma2, double outlier):
    cdef Py_ssize_t m = model.shape[0], n = observed.shape[0], d = model.shape[1]
    cdef double inv = 1.0 / (2.0 * sigma2)
    d2_arr = np.empty((m, n), dtype=np.float64)
    out_arr = np.empty((m, n), dtype=np.float64)
    colmin_arr = np.full(n, np.inf, dtype=np.float64)
    cdef double[:, ::1] d2 = d2_arr
    cdef double[:, ::1] out = out_arr
    cdef double[::1] colmin = colmin_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff, den, arg
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(d):
                    diff = model[i, k] - observed[j, k]
                    acc += diff * diff
                d2[i, j] = acc
                if acc < colmin[j]:
                    colmin[j] = acc
        for j in range(n):
            den = 0.0
            for i in range(m):
                arg = (colmin[j] - d2[i, j]) * inv
                if arg < UNDERFLOW_ARG:
                    out[i, j] = 0.0
                else:
                    out[i, j] = exp(arg)
                    den += out[i, j]
            if outlier > 0.0:
                arg = colmin[j] * inv
                if arg > 709.0:
                    # outlier term overflows: responsibilities vanish
                    for i in range(m):
                        out[i, j] = 0.0
                    continue
                den += outlier * exp(arg)
            for i in range(m):
                out[i, j] /= den
    return out_arr


def mixture_energy(const double[:, ::1] model, const double[:, ::1] observed, double sigma2, bint model_outer):
    e, _ = _energy_impl(model, observed, sigma2, model_outer, False)
    return e


def mixture_energy_grad(const double[:, ::1] model, const double[:, ::1] observed, double sigma2, bint model_outer):
    return _energy_impl(model, observed, sigma2, model_outer, True)


cdef _energy_impl(const double[:, ::1] model, const double[:, ::1] observed, double sigma2,
                  bint model_outer, bint want_grad):
    cdef Py_ssize_t m = model.shape[0], n = observed.shape[0], d = model.shape[1]
    cdef double inv = 1.0 / (2.0 * sigma2)
    d2_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] d2 = d2_arr
    cdef double[:, ::1] grad
    cdef double[::1] colmin
    grad_arr = None
    colmin_arr = None
    if want_grad:
        grad_arr = np.zeros((m, d), dtype=np.float64)
        grad = grad_arr
    if not model_outer:
        colmin_arr = np.full(n, np.inf, dtype=np.float64)
        colmin = colmin_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff, dmin, s, energy = 0.0, w, arg
    with nogil:
        if model_outer:
            for i in range(m):
                dmin = INFINITY
                for j in range(n):
                    acc = 0.0
                    for k in range(d):
                        diff = model[i, k] - observed[j, k]
                        acc += diff * diff
                    d2[i, j] = acc
                    if acc < dmin:
                        dmin = acc
                s = 0.0
                for j in range(n):
                    arg = (dmin - d2[i, j]) * inv
                    if arg < NEGLIGIBLE_ARG:
                        d2[i, j] = 0.0
                    else:
                        d2[i, j] = exp(arg)
                        s += d2[i, j]
                energy += dmin * inv - log(s)
                if want_grad:
                    for j in range(n):
                        if d2[i, j] == 0.0:
                            continue
                        w = d2[i, j] / s
                        for k in range(d):
                            grad[i, k] += w * (model[i, k] - observed[j, k])
        else:
            for i in range(m):
                for j in range(n):
                    acc = 0.0
                    for k in range(d):
                        diff = model[i, k] - observed[j, k]
                        acc += diff * diff
                    d2[i, j] = acc
                    if acc < colmin[j]:
                        colmin[j] = acc
            for j in range(n):
                s = 0.0
                for i in range(m):
                    arg = (colmin[j] - d2[i, j]) * inv
                    if arg < NEGLIGIBLE_ARG:
                        d2[i, j] = 0.0
                    else:
                        d2[i, j] = exp(arg)
                        s += d2[i, j]
                energy += colmin[j] * inv - log(s)
                if want_grad:
                    for i in range(m):
                        if d2[i, j] == 0.0:
                            continue
                        w = d2[i, j] / s
                        for k in range(d):
                            grad[i, k] += w * (model[i, k] - observed[j, k])
        if want_grad:
            for i in range(m):
                for k in range(d):
                    grad[i, k] /= sigma2
    if want_grad:
        return energy, grad_arr
    return energy, None


def raycast_first_hit(const double[:, ::1] origins, const double[:, ::1] dirs,
                      const double[:, ::1] vertices, const long long[:, ::1] faces):
    cdef Py_ssize_t n_rays = origins.shape[0], n_faces = faces.shape[0]
    t_arr = np.full(n_rays, np.inf, dtype=np.float64)
    idx_arr = np.full(n_rays, -1, dtype=np.int64)
    cdef double[::1] t_best = t_arr
    cdef long long[::1] idx_best = idx_arr
    cdef Py_ssize_t r, f
    cdef double ox, oy, oz, dx, dy, dz
    cdef double e1x, e1y, e1z, e2x, e2y, e2z
    cdef double px, py, pz, tx, ty, tz, qx, qy, qz
    cdef double det, inv_det, u, v, t
    cdef long long i0, i1, i2
    with nogil:
        for r in range(n_rays):
            ox = origins[r, 0]; oy = origins[r, 1]; oz = origins[r, 2]
            dx = dirs[r, 0]; dy = dirs[r, 1]; dz = dirs[r, 2]
            for f in range(n_faces):
                i0 = faces[f, 0]; i1 = faces[f, 1]; i2 = faces[f, 2]
                e1x = vertices[i1, 0] - vertices[i0, 0]
                e1y = vertices[i1, 1] - vertices[i0, 1]
                e1z = vertices[i1, 2] - vertices[i0, 2]
                e2x = vertices[i2, 0] - vertices[i0, 0]
                e2y = vertices[i2, 1] - vertices[i0, 1]
                e2z = vertices[i2, 2] - vertices[i0, 2]
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if fabs(det) <= 1e-12:
                    continue
                inv_det = 1.0 / det
                tx = ox - vertices[i0, 0]
                ty = oy - vertices[i0, 1]
                tz = oz - vertices[i0, 2]
                u = (tx * px + ty * py + tz * pz) * inv_det
                if u < -1e-9 or u > 1.0 + 1e-9:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv_det
                if v < -1e-9 or u + v > 1.0 + 1e-9:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv_det
                if t > 1e-9 and t < t_best[r]:
                    t_best[r] = t
                    idx_best[r] = f
    return t_arr, idx_arr

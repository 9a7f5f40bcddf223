"""Hot numerical kernels with a compiled core and a pure-numpy fallback.

The backend is selected once at import time. Set ``GRASPWARP_KERNELS`` to
``compiled`` or ``python`` to force a backend; the default ``auto`` prefers
the compiled extension when it was built.
"""

import importlib
import os

import numpy as np

from . import _numpy_impl

_requested = os.environ.get("GRASPWARP_KERNELS", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(f"GRASPWARP_KERNELS must be auto|compiled|python, got {_requested!r}")

_core = None
if _requested in ("auto", "compiled"):
    try:
        _core = importlib.import_module(__name__ + "._core")
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "GRASPWARP_KERNELS=compiled but the graspwarp._kernels._core "
                "extension is not built; install with a C compiler or use "
                "GRASPWARP_KERNELS=python"
            ) from None

_impl = _core if _core is not None else _numpy_impl

BACKEND = "compiled" if _core is not None else "python"


def backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return BACKEND


def _pts(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def kernel_matrix(a, b, beta):
    return _impl.kernel_matrix(_pts(a), _pts(b), float(beta))


def posteriors(model, observed, sigma2, outlier):
    return _impl.posteriors(_pts(model), _pts(observed), float(sigma2), float(outlier))


def mixture_energy(model, observed, sigma2, model_outer):
    return _impl.mixture_energy(_pts(model), _pts(observed), float(sigma2), bool(model_outer))


def mixture_energy_grad(model, observed, sigma2, model_outer):
    return _impl.mixture_energy_grad(_pts(model), _pts(observed), float(sigma2), bool(model_outer))


def raycast_first_hit(origins, dirs, vertices, faces):
    return _impl.raycast_first_hit(
        _pts(origins),
        _pts(dirs),
        _pts(vertices),
        np.ascontiguousarray(faces, dtype=np.int64),
    )

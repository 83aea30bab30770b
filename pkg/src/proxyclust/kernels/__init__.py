"""Hot numeric kernels with a compiled core and a pure-NumPy fallback.

The backend is picked once at import: the Cython extension if it was
built, unless PROXYCLUST_PURE=1 forces the fallback.  Input validation
lives here so both backends stay thin.
"""

import os

import numpy as np

from ..errors import DegenerateFitError
from . import _fallback

VAR_FLOOR = 1e-8

_impl = _fallback
BACKEND = "numpy"
if os.environ.get("PROXYCLUST_PURE", "") != "1":
    try:
        from . import _core

        _impl = _core
        BACKEND = "cython"
    except ImportError:
        pass


def available_backends():
    """Mapping of backend name -> raw module, for tests and benchmarks."""
    out = {"numpy": _fallback}
    try:
        from . import _core

        out["cython"] = _core
    except ImportError:
        pass
    return out


def _check_gmm_input(values):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.shape[0] < 4:
        raise ValueError(f"need at least 4 values to fit a mixture, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("mixture input contains non-finite values")
    if v.max() == v.min():
        raise DegenerateFitError("all values identical; two-component fit is undefined")
    return v


def gmm2_fit(values, max_iter=200, tol=1e-7, var_floor=VAR_FLOOR, impl=None):
    """Fit a two-component 1-D Gaussian mixture by EM.

    Returns (weights, means, variances, loglik_trace) with means ordered
    ascending.  Raises DegenerateFitError when the input has zero spread.
    """
    v = _check_gmm_input(values)
    backend = impl if impl is not None else _impl
    return backend.gmm2_fit(v, max_iter, tol, var_floor)


def resize_bilinear(src, out_h, out_w, impl=None):
    """Bilinear 2-D resize (half-pixel centers, edges clamped)."""
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ValueError(f"expected a non-empty 2-D map, got shape {src.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output shape must be positive")
    backend = impl if impl is not None else _impl
    return backend.resize_bilinear(src, int(out_h), int(out_w))

"""Backend selection for the batch wavelet kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over.  Setting ``RELUWAVE_PURE_PYTHON=1`` forces the
numpy path (used by the benchmark and the backend-agreement tests).
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("RELUWAVE_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def _prep(u, w, ks, bs):
    u = np.ascontiguousarray(np.atleast_2d(u), dtype=np.float64)
    ks = np.ascontiguousarray(ks, dtype=np.int64).reshape(-1)
    bs = np.ascontiguousarray(bs, dtype=np.float64).reshape(ks.shape[0], u.shape[1])
    if w is None:
        w = np.zeros(u.shape[0])
    w = np.ascontiguousarray(w, dtype=np.float64).reshape(u.shape[0])
    return u, w, ks, bs


def psi_eval(u, ks, bs, cd, w=None, impl=None):
    """Dense matrix of wavelet values, shape (points, terms)."""
    u, w, ks, bs = _prep(u, w, ks, bs)
    return (impl or _impl).psi_eval(u, w, ks, bs, float(cd))


def psi_combine(u, ks, bs, coeffs, cd, w=None, impl=None):
    """Weighted sum of wavelet terms at each point."""
    u, w, ks, bs = _prep(u, w, ks, bs)
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64).reshape(ks.shape[0])
    return (impl or _impl).psi_combine(u, w, ks, bs, coeffs, float(cd))


def psi_triplets(u, ks, bs, cd, w=None, impl=None):
    """Nonzero wavelet values as (row, col, value) arrays."""
    u, w, ks, bs = _prep(u, w, ks, bs)
    return (impl or _impl).psi_triplets(u, w, ks, bs, float(cd))

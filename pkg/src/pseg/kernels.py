"""Backend selection for the hot inner loops.

The compiled extension ``pseg._kernels`` is used when it was built and
importable; otherwise the numpy implementations in ``pseg._kernels_py`` are
used. Setting ``PSEG_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
DENSE_WINDOW_FRACTION = 0.15  # measured crossover, see benchmarks/bench_kernels.py

if os.environ.get("PSEG_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous one."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from . import _kernels as compiled

        _impl = compiled
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return previous


def im2col(x, k, stride, ho, wo):
    """Unfold a padded (c, h, w) array into (c*k*k, ho*wo) patch columns."""
    return _impl.im2col(np.ascontiguousarray(x), int(k), int(stride), int(ho), int(wo))


def col2im(cols, c, hp, wp, k, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back onto a (c, hp, wp) grid."""
    return _impl.col2im(np.ascontiguousarray(cols), int(c), int(hp), int(wp), int(k), int(stride), int(ho), int(wo))


def erode_valid(labels, radius=2):
    """True where the border-clamped (2r+1)^2 window holds a single label."""
    return _impl.erode_valid(np.ascontiguousarray(labels, dtype=np.int64), int(radius))


def window_scatter(feats, centers, threshold):
    """Scatter matrices sum f f^T over features with |f.c| >= threshold, per center.

    ``feats`` is (n, d), ``centers`` is (s, d); returns ((s, d, d), (s,) counts).
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if _impl is not _kernels_py and feats.size and centers.size:
        # the compiled loop wins on sparse windows; dense ones favour one BLAS product
        if np.mean(np.abs(centers @ feats.T) >= threshold) > DENSE_WINDOW_FRACTION:
            return _kernels_py.window_scatter(feats, centers, float(threshold))
    return _impl.window_scatter(feats, centers, float(threshold))

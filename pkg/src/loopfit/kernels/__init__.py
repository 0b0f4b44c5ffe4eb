"""Hot-kernel backend selection.

The compiled Cython extension is preferred; the pure-numpy fallback is used
when it is missing or when LOOPFIT_NO_EXT is set. Both expose the same
functions and agree numerically (see tests/test_kernels.py); the benchmark
in benchmarks/bench_kernels.py compares their speed.
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("LOOPFIT_NO_EXT", "") not in ("", "0"):
    _impl = _fallback
    HAVE_COMPILED = False
else:
    try:
        from . import _compiled as _impl

        HAVE_COMPILED = True
    except ImportError:
        _impl = _fallback
        HAVE_COMPILED = False


def backend_name():
    return "compiled" if HAVE_COMPILED else "numpy"


def conv2d_forward(x, w, b):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    b = np.ascontiguousarray(b)
    return _impl.conv2d_forward(x, w, b)


def conv2d_backward(x, w, dy, need_dx=True):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    return _impl.conv2d_backward(x, w, dy, need_dx=need_dx)


def dtw_table(dist):
    dist = np.ascontiguousarray(dist)
    return _impl.dtw_table(dist)

"""Backend selection for the convolution hot loops.

The compiled Cython module is preferred. Setting the environment variable
``MAGTAC_PURE_PYTHON=1`` forces the numpy fallback, which is also used
automatically when the extension was not built.
"""
import os

import numpy as np

from magtac import _fallback

try:
    from magtac import _kernels

    HAVE_CYTHON = True
except ImportError:  # extension not built
    _kernels = None
    HAVE_CYTHON = False

if HAVE_CYTHON and os.environ.get("MAGTAC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND, _impl = "cython", _kernels
else:
    BACKEND, _impl = "python", _fallback


def im2col(x, kh, kw, stride, pad, backend=None):
    """Unfold ``x`` (N, C, H, W) into a (N*OH*OW, C*KH*KW) patch matrix."""
    impl = _pick(backend)
    x = np.ascontiguousarray(x)
    return impl.im2col(x, int(kh), int(kw), int(stride), int(pad))


def col2im(cols, shape, kh, kw, stride, pad, backend=None):
    """Adjoint of :func:`im2col`: scatter-add patches back into an (N, C, H, W) array."""
    impl = _pick(backend)
    n, c, h, w = shape
    cols = np.ascontiguousarray(cols)
    return impl.col2im(cols, n, c, h, w, int(kh), int(kw), int(stride), int(pad))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _fallback
    if backend == "cython":
        if not HAVE_CYTHON:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _kernels
    raise ValueError(f"unknown backend {backend!r}")

"""Pure-numpy versions of the convolution kernels.

Used when the compiled extension is unavailable, or when
``MAGTAC_PURE_PYTHON=1`` is set. Column layout: rows ``(n, oh, ow)``,
columns ``(c, kh, kw)``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n_batch, chans, height, width = x.shape
    oh = (height + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n_batch * oh * ow, chans * kh * kw)


def col2im(cols, n_batch, chans, height, width, kh, kw, stride, pad):
    oh = (height + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n_batch, oh, ow, chans, kh, kw)
    padded = np.zeros((n_batch, chans, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    for p in range(kh):
        for q in range(kw):
            padded[
                :, :, p : p + stride * (oh - 1) + 1 : stride, q : q + stride * (ow - 1) + 1 : stride
            ] += cols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(padded[:, :, pad : pad + height, pad : pad + width])

import numpy as np

from magtac.nn.layers import ShapeError


def smooth_l1_loss(pred, target, beta=1.0):
    """Mean Smooth L1 (Huber-style) loss and its gradient w.r.t. ``pred``.

    Per element: ``0.5 d^2 / beta`` when ``|d| < beta``, otherwise ``|d| - 0.5 beta``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    d = pred - target
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).mean()
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(loss), grad.astype(pred.dtype, copy=False)

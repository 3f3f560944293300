import numpy as np


class Adam:
    """Adam with L2 weight decay folded into the gradient (``g <- g + wd * theta``).

    Decay is applied only to parameters flagged ``decay=True`` (weights).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.t)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4, t=1):
    """One in-place Adam update of every parameter at step ``t`` (1-based)."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.value
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)

"""Shared helpers for model-level checks."""
import numpy as np

from magtac import nn
from magtac.fusion import ForceModel


def _relus(module):
    if isinstance(module, nn.ReLU):
        yield module
    for child in module._children():
        yield from _relus(child)


def fusion_grad_check(image, mag, label, seed=0, probes=12, tolerance=1e-4, h=1e-5):
    """Grad-check every parameter tensor of a float64 fusion model on one sample.

    Batch norm runs in eval mode (one sample), after a couple of training-mode
    passes so the running statistics are not the identity. Probes whose +h and
    -h evaluations flip any ReLU mask straddle a kink and are replaced.
    Returns ``(report, skipped)``.
    """
    rng = np.random.default_rng(seed)
    model = ForceModel("fusion", image.shape[-1], seed=seed, dtype=np.float64)
    model.train()
    for _ in range(2):
        model.forward(rng.standard_normal((4,) + image.shape[1:]), rng.standard_normal((4,) + mag.shape[1:]))
    model.set_mag_normalization(rng.standard_normal((4,) + mag.shape[1:]))
    model.eval()
    relus = list(_relus(model))
    target = np.array([label], dtype=np.float64)

    def loss():
        value = nn.smooth_l1_loss(model.forward(image, mag), target)[0]
        return value, [r._mask.copy() for r in relus]

    model.zero_grad()
    _, grad = nn.smooth_l1_loss(model.forward(image, mag), target)
    model.backward(grad)
    report = nn.GradCheckReport(tolerance)
    skipped = 0
    for name, p in model.named_parameters():
        flat = p.value.reshape(-1)
        assert np.shares_memory(flat, p.value)
        analytic, numeric = [], []
        for i in rng.permutation(flat.size):
            if len(analytic) == probes:
                break
            old = flat[i]
            flat[i] = old + h
            fp, mp = loss()
            flat[i] = old - h
            fm, mm = loss()
            flat[i] = old
            if any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                skipped += 1
                continue
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
        report.errors[name] = nn.relative_error(np.array(analytic), np.array(numeric))
    return report, skipped

"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (max {self.max_error:.3e} < {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(analytic, numeric, scale_floor=1e-3, floor=1e-12):
    """Max elementwise ``|a - n| / max(|a|, |n|, scale_floor * max|a|, floor)``.

    Entries far below the largest gradient magnitude are judged against that
    magnitude, so rounding noise on near-zero entries does not dominate.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if not analytic.size:
        return 0.0
    floor = max(floor, scale_floor * float(np.max(np.abs(analytic))))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, x, h=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``indices`` restricts probing to a subset of flat positions; other entries are NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def grad_check(loss_and_grads, inputs, tolerance=1e-5, h=1e-5, max_probes=None, rng=None):
    """Compare analytic gradients against central differences.

    ``loss_and_grads()`` must return ``(loss, {name: grad})`` evaluated at the
    current contents of ``inputs`` (a ``{name: array}`` dict, float64, mutated
    in place during probing). ``max_probes`` caps the number of probed entries
    per input, chosen at random.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    report = GradCheckReport(tolerance)
    for name, arr in inputs.items():
        idx = None
        if max_probes is not None and arr.size > max_probes:
            idx = rng.choice(arr.size, size=max_probes, replace=False)
        num = numeric_grad(lambda: loss_and_grads()[0], arr, h=h, indices=idx)
        a = analytic[name].reshape(-1)
        n = num.reshape(-1)
        sel = slice(None) if idx is None else idx
        report.errors[name] = relative_error(a[sel], n[sel])
    return report

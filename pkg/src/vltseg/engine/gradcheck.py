"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, no_grad, reset_tape


@dataclass
class GradCheckReport:
    rtol: float
    atol: float
    # one entry per checked scalar: (param name, flat index, analytic, numeric)
    entries: list = field(default_factory=list)

    def errors(self):
        a = np.array([e[2] for e in self.entries])
        n = np.array([e[3] for e in self.entries])
        abs_err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(scale > 0, abs_err / np.where(scale > 0, scale, 1.0), 0.0)
        return abs_err, rel

    def passed_mask(self):
        abs_err, rel = self.errors()
        return (rel < self.rtol) | (abs_err <= self.atol)

    @property
    def pass_fraction(self):
        if not self.entries:
            return 1.0
        return float(self.passed_mask().mean())

    @property
    def max_abs_err_of_failures(self):
        if not self.entries:
            return 0.0
        abs_err, _ = self.errors()
        bad = ~self.passed_mask()
        return float(abs_err[bad].max()) if bad.any() else 0.0

    def failures(self):
        mask = self.passed_mask()
        return [e for e, ok in zip(self.entries, mask) if not ok]

    def ok(self, min_fraction=1.0, fallback_atol=None):
        if self.pass_fraction < min_fraction:
            return False
        if fallback_atol is not None and self.max_abs_err_of_failures > fallback_atol:
            return False
        return True


def numeric_grad(loss_fn, param, index, step=1e-5):
    flat = param.data.reshape(-1)
    orig = flat[index]
    with no_grad():
        flat[index] = orig + step
        fp = loss_fn().item()
        flat[index] = orig - step
        fm = loss_fn().item()
    flat[index] = orig
    return (fp - fm) / (2.0 * step)


def check_gradients(loss_fn, named_params, step=1e-5, rtol=1e-4, atol=1e-7, max_per_param=None, rng=None,
                    retry_steps=()):
    """Compare backward() against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values.
    ``max_per_param`` caps how many entries of each tensor are probed (chosen
    with ``rng``); ``None`` probes every entry. An entry that disagrees at
    ``step`` is probed again at each of ``retry_steps`` in turn: when a ReLU
    input sits within one step of zero the difference quotient straddles the
    kink, while a wrong analytic gradient disagrees at every step.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    reset_tape()
    backward(loss_fn())
    report = GradCheckReport(rtol=rtol, atol=atol)
    for name, p in named_params:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        indices = np.arange(p.size)
        if max_per_param is not None and p.size > max_per_param:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(rng.choice(p.size, size=max_per_param, replace=False))
        for i in indices:
            a = float(analytic[i])
            num = numeric_grad(loss_fn, p, int(i), step)
            for h in retry_steps:
                if _agrees(a, num, rtol, atol):
                    break
                num = numeric_grad(loss_fn, p, int(i), h)
            report.entries.append((name, int(i), a, num))
    return report


def _agrees(a, n, rtol, atol):
    err = abs(a - n)
    scale = max(abs(a), abs(n))
    return err <= atol or (scale > 0 and err / scale < rtol) or scale == 0

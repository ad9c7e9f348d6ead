"""Central finite-difference verification of hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        line = f"{self.name:<28} max rel err {self.max_error:.3e}  (tol {self.tolerance:.0e})  {status}"
        n_skipped = sum(self.skipped.values())
        return f"{line}  [{n_skipped} probes straddled a kink]" if n_skipped else line


def compare_gradients(loss, tensors, analytic, step=1e-4, samples=32, rng=None,
                      kinks=None, skipped=None):
    """Max relative error per tensor between `analytic` and central differences.

    `loss()` must read the arrays in `tensors` by reference; they are
    perturbed in place and restored.  At most `samples` elements per tensor
    are probed (all of them when the tensor is smaller).

    `kinks()`, when given, returns the ReLU-family sign pattern of the last
    `loss()` call.  A probe whose +step or -step evaluation changes that
    pattern straddles a kink, where the difference quotient is not a
    derivative estimate; it is discarded and another element is drawn.
    Discard counts go into the `skipped` dict.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        k = min(samples, flat.size)
        order = rng.permutation(flat.size)
        base = None
        if kinks is not None:
            loss()
            base = kinks()
        worst, used, dropped = 0.0, 0, 0
        for i in order:
            if used == k:
                break
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            crossed = base is not None and kinks() != base
            flat[i] = orig - step
            down = loss()
            crossed = crossed or (base is not None and kinks() != base)
            flat[i] = orig
            if crossed:
                dropped += 1
                continue
            used += 1
            numeric = (up - down) / (2 * step)
            worst = max(worst, float(rel_error(grad[i], numeric)))
        errors[name] = worst
        if skipped is not None and dropped:
            skipped[name] = dropped
    return errors


def finite_diff_check(layer, x, tolerance=1e-5, step=1e-4, samples=32, seed=0,
                      training=True, name=None) -> GradCheckReport:
    """Check a single layer's input and parameter gradients.

    The scalar loss is the sum of the output weighted by a fixed random
    projection (a plain sum has identically zero gradient through batch norm).
    Stochastic layers see the same mask on every evaluation.
    """
    x = np.array(x, dtype=np.float64)
    mask_seed = seed + 7919

    def run(inp):
        return layer.forward(inp, training=training, rng=make_rng(mask_seed))

    proj = np.random.default_rng(seed).standard_normal(run(x).shape)

    def loss():
        return float(np.sum(run(x) * proj))

    run(x)
    analytic = {"input": layer.backward(proj)}
    tensors = {"input": x}
    for k, v in layer.params.items():
        analytic[k] = layer.grads[k].copy()
        tensors[k] = v
    report = GradCheckReport(name or repr(layer), tolerance)
    report.errors = compare_gradients(loss, tensors, analytic, step, samples,
                                      np.random.default_rng(seed + 1))
    return report

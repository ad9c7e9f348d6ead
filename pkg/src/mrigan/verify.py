"""Gradient verification suites: every layer in isolation, and the whole
generator/discriminator pair end to end."""
from __future__ import annotations

import numpy as np

from .gradcheck import GradCheckReport, compare_gradients, finite_diff_check
from .layers import Activation, AvgPool2x, BatchNorm, Conv2D, Dense, Upsample2x
from .model import ArchitectureSchedule, bce, init_params, sample_noise
from .rng import make_rng


def _randomize(layer, rng):
    for v in layer.params.values():
        v[...] = rng.normal(size=v.shape)
    return layer


def _avoid_kinks(x, eps=1e-3):
    x = x.copy()
    x[np.abs(x) < eps] = 0.5
    return x


def _cases(rng):
    """(name, layer, input, tolerance) for one random draw."""
    f64 = np.float64
    bn = BatchNorm(3, dtype=f64)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][...] = rng.normal(size=3)
    out = [
        ("dense", _randomize(Dense(8, 5, dtype=f64), rng), rng.normal(size=(4, 1, 1, 8)), 1e-5),
        ("conv2d k=3", _randomize(Conv2D(2, 3, 3, dtype=f64), rng), rng.normal(size=(1, 6, 6, 2)), 1e-5),
        ("conv2d k=4", _randomize(Conv2D(2, 3, 4, dtype=f64), rng), rng.normal(size=(1, 6, 6, 2)), 1e-5),
        ("upsample2x", Upsample2x(), rng.normal(size=(2, 3, 3, 2)), 1e-5),
        ("avgpool2x", AvgPool2x(), rng.normal(size=(2, 4, 4, 2)), 1e-5),
        ("batchnorm (train)", bn, rng.normal(size=(4, 2, 2, 3)), 1e-4),
    ]
    for kind in Activation.KINDS:
        out.append((kind, Activation(kind), _avoid_kinks(rng.normal(size=(2, 3, 3, 2))), 1e-5))
    return out


def bce_check(seed: int, tolerance=1e-5, step=1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=(6, 1, 1, 1))
    y = rng.integers(0, 2, size=p.shape).astype(float)
    report = GradCheckReport("bce", tolerance)
    report.errors = compare_gradients(lambda: bce(p, y)[0], {"p": p}, {"p": bce(p, y)[1]},
                                      step, 32, np.random.default_rng(seed))
    return report


def layer_suite(seeds=range(5)) -> list[GradCheckReport]:
    """One report per (layer kind, seed)."""
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for name, layer, x, tol in _cases(rng):
            reports.append(finite_diff_check(layer, x, tolerance=tol, seed=seed, name=f"{name} [seed {seed}]"))
        reports.append(bce_check(seed))
        reports[-1].name = f"bce [seed {seed}]"
    return reports


def summarize(reports) -> dict[str, GradCheckReport]:
    """Collapse per-seed reports to the worst one per layer kind."""
    worst = {}
    for r in reports:
        kind = r.name.split(" [seed")[0]
        if kind not in worst or r.max_error > worst[kind].max_error:
            worst[kind] = r
    return worst


def end_to_end(image_size=32, batch=2, seed=0, tolerance=1e-4, step=1e-6, samples=32):
    """Finite-difference check of both adversarial losses through the full stacks.

    Returns (generator report, discriminator report).  Dropout and input-noise
    draws are frozen by replaying the same random stream on every evaluation.
    Probes whose perturbation flips any ReLU/LeakyReLU input across zero are
    redrawn (see `compare_gradients`); with thousands of units downstream of
    every weight such crossings are routine and say nothing about the
    backward pass.
    """
    schedule = ArchitectureSchedule(image_size)
    gen, disc = init_params(schedule, make_rng(seed), dtype=np.float64)
    rng = np.random.default_rng(seed)
    z = sample_noise(make_rng(seed, 9), batch, schedule.noise_dim, np.float64)
    real = np.tanh(rng.normal(size=(batch, image_size, image_size, 1)))
    mask_seed = seed + 4242

    def g_loss():
        r = make_rng(mask_seed)
        fake = gen.forward(z, training=True, rng=r)
        return bce(disc.forward(fake, training=True, rng=r), 1.0)

    loss, grad = g_loss()
    gen.backward(disc.backward(grad))
    g_report = GradCheckReport("end-to-end generator", tolerance)
    g_report.errors = compare_gradients(lambda: g_loss()[0], gen.params(),
                                        {k: v.copy() for k, v in gen.grads().items()},
                                        step, samples, np.random.default_rng(seed + 1),
                                        kinks=lambda: gen.kink_pattern() + disc.kink_pattern(),
                                        skipped=g_report.skipped)

    fake = gen.forward(z, training=True, rng=make_rng(mask_seed))

    real_pattern = [b""]

    def d_loss(backprop=False):
        r = make_rng(mask_seed)
        pr = disc.forward(real, training=True, rng=r)
        real_pattern[0] = disc.kink_pattern()
        lr_, gr = bce(pr, 1.0)
        if backprop:
            disc.backward(gr)
            grads_r = disc.grads()
        pf = disc.forward(fake, training=True, rng=r)
        lf, gf = bce(pf, 0.0)
        if backprop:
            disc.backward(gf)
            return {k: g + grads_r[k] for k, g in disc.grads().items()}
        return lr_ + lf

    analytic = d_loss(backprop=True)
    d_report = GradCheckReport("end-to-end discriminator", tolerance)
    d_report.errors = compare_gradients(d_loss, disc.params(), analytic, step, samples,
                                        np.random.default_rng(seed + 2),
                                        kinks=lambda: real_pattern[0] + disc.kink_pattern(),
                                        skipped=d_report.skipped)
    return g_report, d_report

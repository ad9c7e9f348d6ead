"""DCGAN generator/discriminator stacks, BCE losses, initialization and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadSchedule, ShapeMismatch
from .layers import (
    Activation,
    AvgPool2x,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GaussianNoise,
    Reshape,
    Sequential,
    Upsample2x,
)

IMAGE_SIZES = (32, 64, 128, 256)
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class ArchitectureSchedule:
    image_size: int = 256
    noise_dim: int = 512
    base_spatial: int = 4
    base_channels: int = 512
    noise_sigma: float = 0.1
    dropout_rate: float = 0.25
    leaky_alpha: float = 0.2
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.image_size not in IMAGE_SIZES:
            raise BadSchedule(f"image_size must be one of {IMAGE_SIZES}, got {self.image_size}")
        if self.base_spatial * 2 ** self.n_blocks != self.image_size:
            raise BadSchedule("base_spatial * 2**n_blocks must equal image_size")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.image_size)) - 2

    @property
    def gen_channels(self) -> list[int]:
        """Output channels of each upsampling block: 256, 128, ... (8 at 256 px)."""
        return [self.base_channels >> (k + 1) for k in range(self.n_blocks)]

    @property
    def gen_kernels(self) -> list[int]:
        return [4 if k < 2 else 3 for k in range(self.n_blocks)]

    @property
    def disc_channels(self) -> list[int]:
        return self.gen_channels[::-1]


def build_generator(schedule: ArchitectureSchedule, dtype=np.float32) -> Sequential:
    s = schedule
    c0, b = s.base_channels, s.base_spatial
    mk_bn = lambda c: BatchNorm(c, s.bn_momentum, s.bn_epsilon, dtype=dtype)
    # layers feeding a batch norm carry no bias: it would be cancelled exactly
    layers = [
        Dense(s.noise_dim, b * b * c0, bias=False, dtype=dtype),
        Reshape((b, b, c0)),
        mk_bn(c0),
        Activation("relu"),
    ]
    c_in = c0
    for c_out, k in zip(s.gen_channels, s.gen_kernels):
        layers += [
            Upsample2x(),
            Conv2D(c_in, c_out, k, bias=False, dtype=dtype),
            mk_bn(c_out),
            Activation("relu"),
        ]
        c_in = c_out
    layers += [Conv2D(c_in, 1, 3, bias=True, dtype=dtype), Activation("tanh")]
    return Sequential(layers, name="generator")


def build_discriminator(schedule: ArchitectureSchedule, dtype=np.float32) -> Sequential:
    s = schedule
    layers = [GaussianNoise(s.noise_sigma)]
    c_in = 1
    for c_out in s.disc_channels:
        layers += [
            Conv2D(c_in, c_out, 3, bias=False, dtype=dtype),
            BatchNorm(c_out, s.bn_momentum, s.bn_epsilon, dtype=dtype),
            Activation("leaky_relu", alpha=s.leaky_alpha),
            Dropout(s.dropout_rate),
            AvgPool2x(),
        ]
        c_in = c_out
    flat = s.base_spatial * s.base_spatial * c_in
    layers += [
        Reshape((1, 1, flat)),
        Dense(flat, 1, bias=True, dtype=dtype),
        Activation("sigmoid"),
    ]
    return Sequential(layers, name="discriminator")


def init_weights(net: Sequential, rng: np.random.Generator, std: float = 0.02) -> None:
    """Conv/dense weights ~ N(0, std^2), drawn in float64 so that single and
    double precision networks built from the same seed agree."""
    for layer in net.layers:
        for key in ("w", "kernel"):
            if key in layer.params:
                w = layer.params[key]
                w[...] = std * rng.standard_normal(w.shape)


def init_params(schedule: ArchitectureSchedule, rng: np.random.Generator, dtype=np.float32):
    gen = build_generator(schedule, dtype)
    disc = build_discriminator(schedule, dtype)
    init_weights(gen, rng)
    init_weights(disc, rng)
    return gen, disc


def sample_noise(rng: np.random.Generator, n: int, dim: int = 512, dtype=np.float32) -> np.ndarray:
    return rng.standard_normal((n, 1, 1, dim)).astype(dtype)


def bce(p, label):
    """Mean binary cross-entropy and its gradient w.r.t. each probability."""
    p = np.asarray(p)
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    y = np.broadcast_to(np.asarray(label, dtype=pc.dtype), pc.shape)
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (pc - y) / (pc * (1 - pc)) / pc.size
    return float(loss.mean()), grad.astype(p.dtype if p.dtype.kind == "f" else np.float64)


def discriminator_loss(d_real, d_fake) -> float:
    if np.shape(d_real) != np.shape(d_fake):
        raise ShapeMismatch(f"real batch {np.shape(d_real)} vs fake batch {np.shape(d_fake)}")
    return bce(d_real, 1.0)[0] + bce(d_fake, 0.0)[0]


def generator_loss(d_fake) -> float:
    return bce(d_fake, 1.0)[0]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper) -> AdamState:
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to `params` in place."""
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads have different keys")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: grad {g.shape} vs param {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state

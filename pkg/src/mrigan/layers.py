"""Rank-4 (n, h, w, c) layers with explicit forward and backward passes.

Each layer caches what its backward pass needs during ``forward``; call
``backward`` right after the matching ``forward``.  Parameter gradients land
in ``layer.grads`` under the same keys as ``layer.params``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadRate, BatchTooSmall, OddExtent, ShapeMismatch

# upper bound on im2col elements materialized at once
_COLS_BUDGET = 1 << 25


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=True, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def __repr__(self):
        return f"{type(self).__name__}()"


def _check_rank4(x, who):
    if x.ndim != 4:
        raise ShapeMismatch(f"{who} expects an (n, h, w, c) tensor, got shape {x.shape}")


class Dense(Layer):
    """Fully connected map on (n, 1, 1, d_in) tensors."""
    name = "dense"

    def __init__(self, d_in, d_out, bias=True, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.params["w"] = np.zeros((d_in, d_out), dtype=dtype)
        if bias:
            self.params["b"] = np.zeros(d_out, dtype=dtype)

    def forward(self, x, training=True, rng=None):
        _check_rank4(x, "dense")
        if x.shape[1:] != (1, 1, self.d_in):
            raise ShapeMismatch(f"dense expects (n, 1, 1, {self.d_in}), got {x.shape}")
        self._x = x.reshape(x.shape[0], self.d_in)
        y = self._x @ self.params["w"]
        if "b" in self.params:
            y = y + self.params["b"]
        return y.reshape(x.shape[0], 1, 1, self.d_out)

    def backward(self, dy):
        dy = dy.reshape(dy.shape[0], self.d_out)
        self.grads["w"] = self._x.T @ dy
        if "b" in self.params:
            self.grads["b"] = dy.sum(axis=0)
        dx = dy @ self.params["w"].T
        return dx.reshape(dx.shape[0], 1, 1, self.d_in)

    def output_shape(self, shape):
        return (shape[0], 1, 1, self.d_out)

    def __repr__(self):
        return f"Dense({self.d_in} -> {self.d_out})"


def _im2col(xp, k, h, w):
    """(n, h+k-1, w+k-1, c) padded input -> (n*h*w, k*k*c) patch matrix whose
    column order matches a (kh, kw, c_in, c_out) kernel."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(xp.shape[0] * h * w, -1)


def _correlate(xp, wmat, k, h, w, out):
    """Same-size correlation of padded `xp` with a flattened kernel, written
    into `out` in batch chunks to bound patch-matrix memory."""
    n, c = xp.shape[0], xp.shape[3]
    step = max(1, min(n, _COLS_BUDGET // max(h * w * k * k * c, 1)))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        out[lo:hi] = (_im2col(xp[lo:hi], k, h, w) @ wmat).reshape(hi - lo, h, w, -1)
    return out


class Conv2D(Layer):
    """Stride-1 'same' cross-correlation.  Kernel layout is (kh, kw, c_in, c_out);
    even kernels pad floor((k-1)/2) before and the rest after."""
    name = "conv2d"

    def __init__(self, c_in, c_out, kernel_size=3, bias=True, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, kernel_size
        self.params["kernel"] = np.zeros((kernel_size, kernel_size, c_in, c_out), dtype=dtype)
        if bias:
            self.params["b"] = np.zeros(c_out, dtype=dtype)

    @property
    def pads(self):
        before = (self.k - 1) // 2
        return before, self.k - 1 - before

    def forward(self, x, training=True, rng=None):
        _check_rank4(x, "conv2d")
        if x.shape[3] != self.c_in:
            raise ShapeMismatch(f"conv2d expects {self.c_in} input channels, got {x.shape}")
        n, h, w, _ = x.shape
        k = self.k
        pb, pa = self.pads
        xp = np.pad(x, ((0, 0), (pb, pa), (pb, pa), (0, 0)))
        wmat = self.params["kernel"].reshape(-1, self.c_out)
        self._shape = x.shape
        if n * h * w * k * k * self.c_in <= _COLS_BUDGET:
            self._cols, self._xp = _im2col(xp, k, h, w), None
            y = (self._cols @ wmat).reshape(n, h, w, self.c_out)
        else:
            self._cols, self._xp = None, xp
            y = _correlate(xp, wmat, k, h, w,
                           np.empty((n, h, w, self.c_out), dtype=np.result_type(x, wmat)))
        if "b" in self.params:
            y += self.params["b"]
        return y

    def backward(self, dy):
        n, h, w, _ = self._shape
        k, c_in, c_out = self.k, self.c_in, self.c_out
        kernel = self.params["kernel"]
        dyf = dy.reshape(-1, c_out)
        if self._cols is not None:
            dw = self._cols.T @ dyf
        else:
            dw = np.zeros((k * k * c_in, c_out), dtype=kernel.dtype)
            step = max(1, _COLS_BUDGET // (h * w * k * k * c_in))
            for lo in range(0, n, step):
                hi = min(n, lo + step)
                dw += _im2col(self._xp[lo:hi], k, h, w).T @ dy[lo:hi].reshape(-1, c_out)
        self.grads["kernel"] = dw.reshape(kernel.shape)
        if "b" in self.params:
            self.grads["b"] = dy.sum(axis=(0, 1, 2))
        self._cols = self._xp = None

        pb, pa = self.pads
        if c_out <= c_in:
            # full correlation of dy with the spatially flipped, channel-swapped kernel
            flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c_in)
            dyp = np.pad(dy, ((0, 0), (pa, pb), (pa, pb), (0, 0)))
            return _correlate(dyp, flipped, k, h, w, np.empty((n, h, w, c_in), dtype=dy.dtype))
        # scatter patch gradients back (cheap when c_in is small)
        dcols = (dyf @ kernel.reshape(-1, c_out).T).reshape(n, h, w, k, k, c_in)
        dxp = np.zeros((n, h + k - 1, w + k - 1, c_in), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pb:pb + h, pb:pb + w, :]

    def output_shape(self, shape):
        return shape[:3] + (self.c_out,)

    def __repr__(self):
        return f"Conv2D({self.c_in} -> {self.c_out}, k={self.k})"


class Upsample2x(Layer):
    """Nearest-neighbour doubling of height and width."""
    name = "upsample2x"

    def forward(self, x, training=True, rng=None):
        _check_rank4(x, "upsample2x")
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        n, h2, w2, c = dy.shape
        return dy.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))

    def output_shape(self, shape):
        n, h, w, c = shape
        return (n, 2 * h, 2 * w, c)


class AvgPool2x(Layer):
    name = "avgpool2x"

    def forward(self, x, training=True, rng=None):
        _check_rank4(x, "avgpool2x")
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise OddExtent(f"avgpool2x needs even height and width, got {x.shape}")
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, dy):
        return (dy * 0.25).repeat(2, axis=1).repeat(2, axis=2)

    def output_shape(self, shape):
        n, h, w, c = shape
        return (n, h // 2, w // 2, c)


class BatchNorm(Layer):
    """Per-channel normalization over (n, h, w)."""
    name = "batchnorm"

    def __init__(self, channels, momentum=0.99, epsilon=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum, self.epsilon = momentum, epsilon
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, training=True, rng=None):
        _check_rank4(x, "batchnorm")
        if x.shape[3] != self.channels:
            raise ShapeMismatch(f"batchnorm expects {self.channels} channels, got {x.shape}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        self._training = training
        if training:
            if x.shape[0] < 2:
                raise BatchTooSmall(f"batchnorm in training mode needs n >= 2, got {x.shape[0]}")
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = m * rm + (1 - m) * mean
            rv[...] = m * rv + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        self._xhat, self._inv_std = xhat, inv_std
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std = self._xhat, self._inv_std
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 1, 2))
        self.grads["beta"] = dy.sum(axis=(0, 1, 2))
        dxhat = dy * gamma
        if not self._training:
            return dxhat * inv_std
        m = dy.shape[0] * dy.shape[1] * dy.shape[2]
        return (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2))
                                - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))

    def __repr__(self):
        return f"BatchNorm({self.channels})"


class Activation(Layer):
    name = "activation"
    KINDS = ("relu", "leaky_relu", "tanh", "sigmoid")

    def __init__(self, kind, alpha=0.2):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind, self.alpha = kind, alpha
        self.name = kind

    def forward(self, x, training=True, rng=None):
        k = self.kind
        if k == "relu":
            y = np.maximum(x, 0)
        elif k == "leaky_relu":
            y = np.where(x >= 0, x, self.alpha * x).astype(x.dtype, copy=False)
        elif k == "tanh":
            y = np.tanh(x)
        else:
            y = 0.5 * (np.tanh(0.5 * x) + 1.0)
        self._x, self._y = x, y
        return y

    def backward(self, dy):
        k, x, y = self.kind, self._x, self._y
        if k == "relu":
            return dy * (x >= 0)
        if k == "leaky_relu":
            return dy * np.where(x >= 0, 1.0, self.alpha).astype(dy.dtype, copy=False)
        if k == "tanh":
            return dy * (1.0 - y * y)
        return dy * (y * (1.0 - y))

    def kink_side(self):
        """Which side of the kink each input of the last forward sat on."""
        if self.kind in ("relu", "leaky_relu"):
            return self._x >= 0
        return None

    def __repr__(self):
        return f"Activation({self.kind})"


class Dropout(Layer):
    """Inverted dropout; a no-op outside training."""
    name = "dropout"

    def __init__(self, rate=0.25):
        super().__init__()
        if not 0 <= rate < 1:
            raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=True, rng=None):
        if not training or self.rate == 0:
            self._scale = None
            return x
        keep = rng.random(x.shape, dtype=np.float64) >= self.rate
        self._scale = keep.astype(x.dtype) / np.asarray(1.0 - self.rate, dtype=x.dtype)
        return x * self._scale

    def backward(self, dy):
        return dy if self._scale is None else dy * self._scale

    def __repr__(self):
        return f"Dropout({self.rate})"


class GaussianNoise(Layer):
    """Additive N(0, sigma^2) noise during training only."""
    name = "gaussian_noise"

    def __init__(self, sigma=0.1):
        super().__init__()
        if sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {sigma}")
        self.sigma = sigma

    def forward(self, x, training=True, rng=None):
        if not training or self.sigma == 0:
            return x
        noise = rng.standard_normal(x.shape, dtype=np.float64)
        return x + (self.sigma * noise).astype(x.dtype)

    def backward(self, dy):
        return dy

    def __repr__(self):
        return f"GaussianNoise({self.sigma})"


class Reshape(Layer):
    """Reshape the non-batch axes, e.g. (n, 1, 1, 8192) <-> (n, 4, 4, 512)."""
    name = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, training=True, rng=None):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._in)

    def output_shape(self, shape):
        return (shape[0],) + self.shape

    def __repr__(self):
        return f"Reshape{self.shape}"


class Sequential:
    """Fixed stack of layers with flat, ordered parameter naming."""

    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name

    def _keys(self, attr):
        for i, layer in enumerate(self.layers):
            for key, value in getattr(layer, attr).items():
                yield f"{i:02d}_{layer.name}/{key}", layer, key, value

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, _, _, v in self._keys("params")}

    def kink_pattern(self) -> bytes:
        """Packed sign pattern of every piecewise-linear activation input."""
        parts = [np.packbits(side).tobytes() for layer in self.layers
                 if isinstance(layer, Activation) and (side := layer.kink_side()) is not None]
        return b"".join(parts)

    def buffers(self) -> dict[str, np.ndarray]:
        return {k: v for k, _, _, v in self._keys("buffers")}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: layer.grads[key] for k, layer, key, _ in self._keys("params")}

    def state(self) -> dict[str, np.ndarray]:
        """Every array needed to restore this network: params then buffers."""
        out = self.params()
        out.update(self.buffers())
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for attr in ("params", "buffers"):
            for k, layer, key, value in list(self._keys(attr)):
                if k not in arrays:
                    raise KeyError(f"missing array {k!r} for {self.name}")
                src = np.asarray(arrays[k])
                if src.shape != value.shape:
                    raise ShapeMismatch(f"{k}: stored shape {src.shape}, expected {value.shape}")
                value[...] = src

    def forward(self, x, training=True, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def trace(self, input_shape):
        """Per-layer output shapes, computed without running any math."""
        shapes, shape = [], tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append((repr(layer), shape))
        return shapes

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Sequential({self.name}:\n  {inner})"

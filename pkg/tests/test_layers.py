import numpy as np
import pytest

from mrigan import errors
from mrigan.gradcheck import finite_diff_check
from mrigan.layers import (
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
from mrigan.rng import from_state, get_state, make_rng

SEEDS = range(5)


def randomized(layer, seed):
    rng = np.random.default_rng(seed)
    for v in layer.params.values():
        v[...] = rng.normal(size=v.shape)
    return layer


def direct_conv(x, kernel, bias):
    """Brute-force same-padded cross-correlation, floor/ceil padding split."""
    n, h, w, c_in = x.shape
    k = kernel.shape[0]
    pb = (k - 1) // 2
    out = np.zeros((n, h, w, kernel.shape[3]))
    for b in range(n):
        for r in range(h):
            for c in range(w):
                for i in range(k):
                    for j in range(k):
                        rr, cc = r + i - pb, c + j - pb
                        if 0 <= rr < h and 0 <= cc < w:
                            out[b, r, c] += x[b, rr, cc] @ kernel[i, j]
    return out + bias


# --- dense ----------------------------------------------------------------

def test_dense_identity_and_arithmetic():
    d = Dense(2, 2, dtype=np.float64)
    d.params["w"][...] = np.eye(2)
    x = np.array([1.0, 2.0]).reshape(1, 1, 1, 2)
    np.testing.assert_array_equal(d.forward(x), x)
    d.params["b"][...] = 1.0
    np.testing.assert_array_equal(d.forward(x).ravel(), [2.0, 3.0])


def test_dense_shape_mismatch():
    with pytest.raises(errors.ShapeMismatch):
        Dense(3, 2).forward(np.zeros((1, 1, 1, 4), np.float32))


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    layer = randomized(Dense(8, 5, dtype=np.float64), seed)
    x = np.random.default_rng(seed + 100).normal(size=(4, 1, 1, 8))
    assert finite_diff_check(layer, x, seed=seed).passed


# --- conv -----------------------------------------------------------------

def test_conv_1x1_identity():
    c = Conv2D(1, 1, 1, dtype=np.float64)
    c.params["kernel"][...] = 1.0
    x = np.random.default_rng(0).normal(size=(2, 5, 4, 1))
    np.testing.assert_array_equal(c.forward(x), x)


def test_conv_ones_centre_and_corner():
    c = Conv2D(1, 1, 3, dtype=np.float64)
    c.params["kernel"][...] = 1.0
    y = c.forward(np.ones((1, 3, 3, 1)))[0, :, :, 0]
    assert y[1, 1] == 9 and y[0, 0] == 4 and y[2, 2] == 4 and y[0, 1] == 6


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_conv_matches_direct_oracle(k):
    rng = np.random.default_rng(k)
    layer = randomized(Conv2D(3, 4, k, dtype=np.float64), k)
    x = rng.normal(size=(2, 6, 7, 3))
    np.testing.assert_allclose(layer.forward(x),
                               direct_conv(x, layer.params["kernel"], layer.params["b"]),
                               rtol=1e-12, atol=1e-12)


def test_conv_even_kernel_padding_split():
    c = Conv2D(1, 1, 4)
    assert c.pads == (1, 2)
    assert Conv2D(1, 1, 3).pads == (1, 1)


@pytest.mark.parametrize("k,c_in,c_out", [(3, 2, 3), (4, 2, 3), (3, 4, 2), (4, 3, 1)])
@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(k, c_in, c_out, seed):
    layer = randomized(Conv2D(c_in, c_out, k, dtype=np.float64), seed)
    x = np.random.default_rng(seed + 100).normal(size=(1, 6, 6, c_in))
    assert finite_diff_check(layer, x, seed=seed).passed


def test_conv_chunked_path_matches(monkeypatch):
    import mrigan.layers as L
    rng = np.random.default_rng(9)
    layer = randomized(Conv2D(3, 2, 3, dtype=np.float64), 9)
    x = rng.normal(size=(5, 6, 6, 3))
    dy = rng.normal(size=(5, 6, 6, 2))
    y_full = layer.forward(x)
    dx_full = layer.backward(dy)
    dk_full = layer.grads["kernel"].copy()
    monkeypatch.setattr(L, "_COLS_BUDGET", 6 * 6 * 9 * 3 * 2)
    np.testing.assert_allclose(layer.forward(x), y_full, rtol=1e-12)
    np.testing.assert_allclose(layer.backward(dy), dx_full, rtol=1e-12)
    np.testing.assert_allclose(layer.grads["kernel"], dk_full, rtol=1e-12)


# --- resampling -----------------------------------------------------------

def test_upsample_replication_and_backward():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    up = Upsample2x()
    y = up.forward(x)[0, :, :, 0]
    np.testing.assert_array_equal(y, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    np.testing.assert_array_equal(up.backward(np.ones((1, 4, 4, 1))), np.full((1, 2, 2, 1), 4.0))


def test_avgpool_mean_and_inverse():
    pool = AvgPool2x()
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert pool.forward(x).item() == 2.5
    z = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    np.testing.assert_array_equal(pool.forward(Upsample2x().forward(z)), z)
    with pytest.raises(errors.OddExtent):
        pool.forward(np.zeros((1, 3, 4, 1)))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("layer_cls", [Upsample2x, AvgPool2x])
def test_resampling_gradients(layer_cls, seed):
    x = np.random.default_rng(seed).normal(size=(2, 4, 6, 3))
    assert finite_diff_check(layer_cls(), x, seed=seed).passed


# --- batch norm -----------------------------------------------------------

def test_batchnorm_standardizes():
    bn = BatchNorm(3, dtype=np.float64)
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(8, 4, 4, 3))
    y = bn.forward(x, training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-5)


def test_batchnorm_constant_channel_gives_beta():
    bn = BatchNorm(2, dtype=np.float64)
    bn.params["beta"][...] = [0.3, -0.7]
    y = bn.forward(np.full((4, 3, 3, 2), 5.0), training=True)
    np.testing.assert_allclose(y[..., 0], 0.3)
    np.testing.assert_allclose(y[..., 1], -0.7)


def test_batchnorm_running_stats_and_infer():
    bn = BatchNorm(1, momentum=0.9, dtype=np.float64)
    x = np.arange(8, dtype=float).reshape(2, 2, 2, 1)
    bn.forward(x, training=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * 3.5)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var())
    y = bn.forward(x, training=False)
    rm, rv = bn.buffers["running_mean"][0], bn.buffers["running_var"][0]
    np.testing.assert_allclose(y, (x - rm) / np.sqrt(rv + 1e-5))


def test_batchnorm_batch_too_small():
    with pytest.raises(errors.BatchTooSmall):
        BatchNorm(1).forward(np.zeros((1, 2, 2, 1), np.float32), training=True)
    BatchNorm(1).forward(np.zeros((1, 2, 2, 1), np.float32), training=False)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    bn = BatchNorm(3, dtype=np.float64)
    rng = np.random.default_rng(seed)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][...] = rng.normal(size=3)
    bn.buffers["running_var"][...] = rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(4, 2, 2, 3))
    assert finite_diff_check(bn, x, tolerance=1e-4, seed=seed, training=training).passed


# --- activations ----------------------------------------------------------

def test_activation_values():
    f = lambda kind, v: Activation(kind).forward(np.array([v])).item()
    assert f("tanh", 0.0) == 0.0
    assert f("sigmoid", 0.0) == 0.5
    assert f("relu", -1.0) == 0.0
    assert f("leaky_relu", -1.0) == pytest.approx(-0.2)
    assert f("leaky_relu", 3.0) == 3.0


def test_activation_ranges():
    x = np.linspace(-15, 15, 1001)
    s = Activation("sigmoid").forward(x)
    t = Activation("tanh").forward(np.linspace(-5, 5, 101))
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))


def test_kink_derivative_is_positive_side():
    for kind in ("relu", "leaky_relu"):
        a = Activation(kind)
        a.forward(np.zeros(3))
        np.testing.assert_array_equal(a.backward(np.ones(3)), 1.0)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", Activation.KINDS)
def test_activation_gradients(kind, seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep probes away from the kink
    assert finite_diff_check(Activation(kind), x, seed=seed).passed


# --- stochastic layers ----------------------------------------------------

def test_dropout_identity_cases():
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 2))
    np.testing.assert_array_equal(Dropout(0.0).forward(x, True, make_rng(0)), x)
    np.testing.assert_array_equal(Dropout(0.25).forward(x, False), x)
    with pytest.raises(errors.BadRate):
        Dropout(1.0)


def test_dropout_preserves_expectation():
    n = 100_000
    x = np.full((n, 1, 1, 1), 3.0)
    y = Dropout(0.25).forward(x, True, make_rng(1))
    # one element: 0 w.p. 0.25, 4 w.p. 0.75 -> mean 3, std sqrt(3)
    sigma = np.sqrt(3.0 / n)
    assert abs(y.mean() - 3.0) < 3 * sigma
    assert set(np.unique(y)) == {0.0, 4.0}


def test_dropout_backward_uses_mask():
    d = Dropout(0.5)
    x = np.ones((1, 4, 4, 1))
    y = d.forward(x, True, make_rng(2))
    np.testing.assert_array_equal(d.backward(np.ones_like(x)), y)


def test_noise_identity_cases_and_variance():
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 2))
    np.testing.assert_array_equal(GaussianNoise(0).forward(x, True, make_rng(0)), x)
    np.testing.assert_array_equal(GaussianNoise(0.3).forward(x, False), x)
    z = np.zeros((100_000, 1, 1, 1))
    out = GaussianNoise(0.1).forward(z, True, make_rng(3))
    assert abs(out.var() / 0.01 - 1) < 0.05
    np.testing.assert_array_equal(GaussianNoise(0.1).backward(x), x)


def test_stochastic_layers_deterministic_under_same_stream():
    x = np.ones((2, 8, 8, 3), np.float32)
    a = Dropout(0.25).forward(x, True, make_rng(5, 1))
    b = Dropout(0.25).forward(x, True, make_rng(5, 1))
    c = Dropout(0.25).forward(x, True, make_rng(5, 2))
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()
    rng = make_rng(7)
    rng.standard_normal(10)
    snap = get_state(rng)
    n1 = GaussianNoise(0.1).forward(x, True, rng)
    n2 = GaussianNoise(0.1).forward(x, True, from_state(snap))
    assert n1.tobytes() == n2.tobytes()


def test_rng_state_json_round_trip():
    import json
    rng = make_rng(11, 3)
    rng.random(5)
    snap = json.loads(json.dumps(get_state(rng)))
    assert from_state(snap).random(4).tobytes() == rng.random(4).tobytes()


# --- stacks ---------------------------------------------------------------

def test_random_deep_stack_stays_finite():
    rng = np.random.default_rng(0)
    layers = []
    for i in range(5):
        layers += [randomized(Conv2D(4, 4, 3, dtype=np.float64), i), BatchNorm(4, dtype=np.float64),
                   Activation(["relu", "leaky_relu", "tanh", "sigmoid"][i % 4])]
    layers += [Upsample2x(), AvgPool2x(), Reshape((1, 1, 4 * 4 * 4)),
               randomized(Dense(64, 3, dtype=np.float64), 9), Activation("tanh")]
    net = Sequential(layers)
    assert len(net.layers) >= 20
    x = rng.normal(scale=10, size=(3, 4, 4, 4))
    y = net.forward(x, training=True, rng=make_rng(0))
    dx = net.backward(np.ones_like(y))
    assert np.all(np.isfinite(y)) and np.all(np.isfinite(dx))
    assert all(np.all(np.isfinite(g)) for g in net.grads().values())


def test_float32_stays_float32():
    net = Sequential([Conv2D(1, 2, 3), BatchNorm(2), Activation("relu"), AvgPool2x(),
                      Reshape((1, 1, 8)), Dense(8, 1), Activation("sigmoid")])
    x = np.ones((2, 4, 4, 1), np.float32)
    y = net.forward(x)
    assert y.dtype == np.float32
    assert net.backward(np.ones_like(y)).dtype == np.float32
    assert all(g.dtype == np.float32 for g in net.grads().values())

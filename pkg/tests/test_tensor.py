import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavlos import tensor as T
from uavlos.errors import ShapeError
from uavlos.tensor import Tensor

from helpers import fd_check, naive_conv, reference_attention

RNG = np.random.default_rng(1234)
TOL = 1e-4


def _attn_params(rng, D):
    return {k: rng.normal(scale=0.4, size=(D, D) if k[0] == "w" else D)
            for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


# ---------------------------------------------------------------------------
# forward behaviour

def test_conv_identity_kernel_adds_bias():
    x = RNG.normal(size=(2, 5, 5))
    W = np.zeros((2, 2, 3, 3))
    W[0, 0, 1, 1] = W[1, 1, 1, 1] = 1.0
    with T.default_dtype(np.float64):
        y = T.conv2d_same(Tensor(x), Tensor(W), Tensor(np.array([0.5, -1.0])))
    np.testing.assert_allclose(y.data, x + np.array([0.5, -1.0])[:, None, None])


def test_conv_1x1_is_pixelwise_linear():
    x = RNG.normal(size=(3, 4, 6))
    W = RNG.normal(size=(5, 3, 1, 1))
    with T.default_dtype(np.float64):
        y = T.conv2d_same(Tensor(x), Tensor(W))
    np.testing.assert_allclose(y.data, np.einsum("oc,chw->ohw", W[:, :, 0, 0], x), atol=1e-12)


def test_conv_matches_nested_loops():
    x = RNG.normal(size=(3, 5, 5))
    W = RNG.normal(size=(4, 3, 3, 3))
    b = RNG.normal(size=4)
    with T.default_dtype(np.float64):
        y = T.conv2d_same(Tensor(x), Tensor(W), Tensor(b))
    assert np.max(np.abs(y.data - naive_conv(x, W, b))) <= 1e-12


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d_same(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_linear_examples():
    x = RNG.normal(size=5)
    with T.default_dtype(np.float64):
        assert np.allclose(T.linear(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)
        b = RNG.normal(size=3)
        assert np.allclose(T.linear(Tensor(x), Tensor(np.zeros((3, 5))), Tensor(b)).data, b)
        W = RNG.normal(size=(3, 5))
        ref = [sum(W[i, j] * x[j] for j in range(5)) + b[i] for i in range(3)]
        assert np.allclose(T.linear(Tensor(x), Tensor(W), Tensor(b)).data, ref, atol=1e-12)


def test_attention_matches_reference():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(3, 8))
    p = _attn_params(rng, 8)
    with T.default_dtype(np.float64):
        out = T.multi_head_self_attention(Tensor(Z), {k: Tensor(v) for k, v in p.items()}, 2)
    np.testing.assert_allclose(out.data, reference_attention(Z, p, 2), atol=1e-12)


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(6)
    Z = rng.normal(size=(1, 8))
    p = _attn_params(rng, 8)
    with T.default_dtype(np.float64):
        out = T.multi_head_self_attention(Tensor(Z), {k: Tensor(v) for k, v in p.items()}, 4)
    v = Z @ p["wv"].T + p["bv"]
    np.testing.assert_allclose(out.data, v @ p["wo"].T + p["bo"], atol=1e-12)


def test_attention_identical_tokens_identical_rows():
    rng = np.random.default_rng(7)
    Z = np.repeat(rng.normal(size=(1, 8)), 2, axis=0)
    p = {k: Tensor(v) for k, v in _attn_params(rng, 8).items()}
    with T.default_dtype(np.float64):
        out = T.multi_head_self_attention(Tensor(Z), p, 2).data
    np.testing.assert_array_equal(out[0], out[1])


def test_attention_head_divisibility():
    p = {k: Tensor(v) for k, v in _attn_params(RNG, 6).items()}
    with pytest.raises(ShapeError):
        T.multi_head_self_attention(Tensor(np.zeros((2, 6))), p, 4)


def test_feed_forward_examples():
    rng = np.random.default_rng(8)
    Z = rng.normal(size=(4, 3))
    b2 = rng.normal(size=3)
    zero = {"w1": np.zeros((5, 3)), "b1": np.zeros(5), "w2": np.zeros((3, 5)), "b2": b2}
    with T.default_dtype(np.float64):
        out = T.feed_forward(Tensor(Z), {k: Tensor(v) for k, v in zero.items()})
        assert np.allclose(out.data, np.tile(b2, (4, 1)))
        p = {"w1": rng.normal(size=(5, 3)), "b1": rng.normal(size=5),
             "w2": rng.normal(size=(3, 5)), "b2": b2}
        pt = {k: Tensor(v) for k, v in p.items()}
        out = T.feed_forward(Tensor(Z), pt).data
        perm = np.array([2, 0, 3, 1])
        assert np.allclose(T.feed_forward(Tensor(Z[perm]), pt).data, out[perm])
    for i in range(4):
        h = p["w1"] @ Z[i] + p["b1"]
        gl = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
        assert np.allclose(out[i], p["w2"] @ gl + p["b2"], atol=1e-12)


def test_layer_norm_examples():
    with T.default_dtype(np.float64):
        shift = Tensor(np.array([1.0, 2.0, 3.0]))
        out = T.layer_norm(Tensor(np.full((2, 3), 4.2)), Tensor(np.ones(3)), shift)
        np.testing.assert_allclose(out.data, np.tile(shift.data, (2, 1)))
        x = RNG.normal(size=(5, 7))
        g = RNG.normal(size=7)
        y = T.layer_norm(Tensor(x), Tensor(g), Tensor(np.zeros(7))).data
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * g
    np.testing.assert_allclose(y, ref, atol=1e-12)
    with T.default_dtype(np.float64):
        y0 = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    assert np.all(np.abs(y0.mean(axis=1)) < 1e-12)


def test_adaptive_max_pool_examples():
    x = RNG.normal(size=(2, 4, 4)).astype(np.float32)
    assert np.array_equal(T.adaptive_max_pool(Tensor(x), (4, 4)).data, x)
    y = T.adaptive_max_pool(Tensor(x[:, :2, :2]), (1, 1)).data
    assert np.array_equal(y[:, 0, 0], x[:, :2, :2].reshape(2, -1).max(axis=1))
    with pytest.raises(ShapeError):
        T.adaptive_max_pool(Tensor(np.zeros((3, 96, 96))), (224, 224))


def test_adaptive_max_pool_regions_and_ties():
    x = np.arange(5 * 7, dtype=np.float64).reshape(1, 5, 7)
    with T.default_dtype(np.float64):
        y = T.adaptive_max_pool(Tensor(x), (2, 3)).data
    rows = [(0, 2), (2, 5)]
    cols = [(0, 2), (2, 4), (4, 7)]
    ref = [[x[0, r0:r1, c0:c1].max() for c0, c1 in cols] for r0, r1 in rows]
    np.testing.assert_array_equal(y[0], ref)
    # ties: gradient goes to the first element in row-major order
    t = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    T.sum(T.adaptive_max_pool(t, (1, 1))).backward()
    np.testing.assert_array_equal(t.grad[0], [[1, 0], [0, 0]])


def test_patchify_examples():
    assert T.patchify(Tensor(np.zeros((3, 224, 224))), 16).shape == (196, 3 * 256)
    x = RNG.normal(size=(2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(T.patchify(Tensor(x), 8).data[0], x.ravel())
    p = T.patchify(Tensor(x), 4).data
    np.testing.assert_array_equal(T.unpatchify(p, 2, 4), x)
    # second patch in row-major order is the top-right block, channel-major inside
    np.testing.assert_array_equal(p[1], x[:, :4, 4:].ravel())
    with pytest.raises(ShapeError):
        T.patchify(Tensor(x), 3)


def test_elementwise_examples():
    assert T.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    sm = T.softmax(Tensor(np.zeros((2, 4)))).data
    np.testing.assert_allclose(sm, 0.25)
    with T.default_dtype(np.float64):
        rows = T.softmax(Tensor(RNG.normal(size=(6, 9)) * 10)).data.sum(axis=1)
    assert np.all(np.abs(rows - 1.0) <= 1e-12)
    big = T.sigmoid(Tensor(np.array([-30.0, 30.0], dtype=np.float32))).data
    assert np.all((big > 0) & (big < 1))
    c = T.concat_channels(Tensor(np.zeros((128, 30, 30))), Tensor(np.ones((128, 30, 30))))
    assert c.shape == (256, 30, 30)


def test_backward_examples():
    with T.default_dtype(np.float64):
        x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
        x.zero_grad()
        T.sum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)
        # fan-out accumulates
        y = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        T.sum(T.add(T.mul(y, y), y)).backward()
        np.testing.assert_allclose(y.grad, 2 * y.data + 1)
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    e = T.expand(Tensor(np.arange(3.0)), 2)
    assert e.shape == (2, 3)


def test_dtype_policy():
    assert Tensor(np.zeros(2)).data.dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor(np.zeros(2)).data.dtype == np.float64
    assert T.get_default_dtype() == np.float32


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad


def test_deterministic_backward():
    def run():
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        W = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        T.sum(T.gelu(T.conv2d_same(x, W))).backward()
        return x.grad.tobytes() + W.grad.tobytes()
    assert run() == run()


# ---------------------------------------------------------------------------
# gradients

def _conv(ts):
    return T.conv2d_same(*ts)


GRAD_CASES = {
    "add": (lambda t: T.add(t[0], t[1]), [(3, 4), (3, 4)]),
    "sub": (lambda t: T.sub(t[0], t[1]), [(3, 4), (3, 4)]),
    "mul": (lambda t: T.mul(t[0], t[1]), [(3, 4), (3, 4)]),
    "scale": (lambda t: T.scale(t[0], -1.7), [(5,)]),
    "relu": (lambda t: T.relu(t[0]), [(4, 5)]),
    "sigmoid": (lambda t: T.sigmoid(t[0]), [(4, 5)]),
    "gelu": (lambda t: T.gelu(t[0]), [(4, 5)]),
    "softmax": (lambda t: T.softmax(t[0], axis=-1), [(3, 5)]),
    "sum": (lambda t: T.sum(t[0]), [(3, 2)]),
    "mean": (lambda t: T.mean(t[0], axis=1), [(2, 3, 4)]),
    "reshape": (lambda t: T.reshape(t[0], (6, 2)), [(3, 4)]),
    "transpose": (lambda t: T.transpose(t[0], (1, 2, 0)), [(2, 3, 4)]),
    "expand": (lambda t: T.expand(t[0], 3), [(2, 4)]),
    "concat": (lambda t: T.concat([t[0], t[1]], axis=1), [(2, 3), (2, 4)]),
    "concat_channels": (lambda t: T.concat_channels(t[0], t[1]), [(2, 3, 3), (1, 3, 3)]),
    "matmul": (lambda t: T.matmul(t[0], t[1]), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda t: T.linear(t[0], t[1], t[2]), [(3, 4), (5, 4), (5,)]),
    "conv3x3": (_conv, [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv1x1": (_conv, [(2, 5, 4), (1, 2, 1, 1), (1,)]),
    "adaptive_max_pool": (lambda t: T.adaptive_max_pool(t[0], (2, 3)), [(2, 5, 7)]),
    "patchify": (lambda t: T.patchify(t[0], 2), [(2, 4, 4)]),
    "layer_norm": (lambda t: T.layer_norm(t[0], t[1], t[2]), [(3, 6), (6,), (6,)]),
    "attention": (lambda t: T.multi_head_self_attention(
        t[0], dict(zip(("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"), t[1:])), 2),
        [(3, 4), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,)]),
    "feed_forward": (lambda t: T.feed_forward(t[0], dict(zip(("w1", "b1", "w2", "b2"), t[1:]))),
                     [(3, 4), (6, 4), (6,), (4, 6), (4,)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(name, seed):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    assert fd_check(fn, arrays, seed) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_bce_gradients(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=(2, 3, 3)).astype(float)
    err_logit = fd_check(lambda t: T.binary_cross_entropy_with_logits(t[0], y),
                         [rng.normal(size=(2, 3, 3))], seed)
    err_prob = fd_check(lambda t: T.binary_cross_entropy(t[0], y),
                        [rng.uniform(0.05, 0.95, size=(2, 3, 3))], seed)
    assert err_logit <= TOL and err_prob <= TOL


def test_bce_logits_equals_clamped_probability_form():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=30, size=(4, 5, 5))
    y = rng.integers(0, 2, size=z.shape)
    with T.default_dtype(np.float64):
        a = T.binary_cross_entropy_with_logits(Tensor(z), y).item()
        b = T.binary_cross_entropy(T.sigmoid(Tensor(z)), y).item()
    assert abs(a - b) <= 1e-6 * abs(b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6),
       st.sampled_from([1, 3, 5]))
def test_conv_preserves_spatial_dims(cin, cout, h, w, k):
    y = T.conv2d_same(Tensor(np.ones((cin, h, w))), Tensor(np.ones((cout, cin, k, k))))
    assert y.shape == (cout, h, w)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_patchify_roundtrip_property(c, p, n):
    x = np.random.default_rng(c * 7 + p).normal(size=(c, p * n, p * n))
    assert np.array_equal(T.unpatchify(T.patchify(Tensor(x, dtype=np.float64), p).data, c, p), x)

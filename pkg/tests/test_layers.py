import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xrvt import _kernels
from xrvt import layers as L
from xrvt import tensor as T
from xrvt.errors import ConfigError, ContractError, ShapeError
from xrvt.verify import direct_conv_oracle


def t(x, grad=False):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- LayerParams --------------------------------------------------------------

def test_layer_params_bookkeeping():
    P = L.LayerParams()
    P.add("a.w", t(np.ones((2, 2)), True))
    P.add("b.w", t(np.ones(3), True))
    assert P.names() == ["a.w", "b.w"] and len(P) == 2 and "a.w" in P
    P.set_trainable("a.w", False)
    assert not P.is_trainable("a.w") and not P["a.w"].requires_grad
    assert [n for n, _ in P.trainable_items()] == ["b.w"]
    assert P.count() == 7 and P.count(trainable_only=True) == 3
    with pytest.raises(ConfigError):
        P.add("a.w", t([1.0]))


# -- dense ----------------------------------------------------------------------

def test_dense_examples(rng):
    x = rng.normal(size=(3, 2))
    assert np.array_equal(L.dense(t(x), t(np.eye(2)), t(np.zeros(2))).data, x)
    assert L.dense(t([[1, 2]]), t([[1, 0], [0, 1]]), t([10, 20])).data.tolist() == [[11, 22]]


def test_dense_gradients(rng):
    x, W, b = t(rng.normal(size=(4, 3)), True), t(rng.normal(size=(3, 2)), True), t(rng.normal(size=2), True)
    w = rng.normal(size=(4, 2))
    assert T.grad_check(lambda: (L.dense(x, W, b) * w).sum(), [x, W, b]) <= 1e-4


def test_dense_shape_errors():
    with pytest.raises(ShapeError):
        L.dense(t(np.ones((2, 3))), t(np.ones((4, 2))))


# -- conv2d ------------------------------------------------------------------------

def test_identity_kernel_reproduces_input(rng):
    x = rng.normal(size=(2, 5, 6, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1] = 1
    assert np.array_equal(L.conv2d(t(x), t(k), 1, 1).data, x)


def test_all_ones_kernel_hand_value():
    x = np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1)
    assert L.conv2d(t(x), t(np.ones((2, 2, 1, 1)))).data.reshape(-1).tolist() == [10.0]


@pytest.mark.parametrize("backend", ["numba", "numpy"])
@given(h=st.integers(3, 8), w=st.integers(3, 8), cin=st.integers(1, 2), cout=st.integers(1, 3),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 10**6))
def test_conv_equals_direct_oracle_exactly(backend, h, w, cin, cout, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(2, h, w, cin)), rng.normal(size=(3, 3, cin, cout))
    with _kernels.backend(backend):
        out = L.conv2d(t(x), t(k), stride, pad).data
    assert np.array_equal(out, direct_conv_oracle(x, k, stride, pad))


def test_conv_gradients(rng):
    x, k = t(rng.normal(size=(2, 5, 4, 2)), True), t(rng.normal(size=(3, 3, 2, 3)), True)
    w = rng.normal(size=(2, 3, 2, 3))
    assert T.grad_check(lambda: (L.conv2d(x, k, 2, 1) * w).sum(), [x, k]) <= 1e-4


def test_conv_backends_agree_on_gradients(rng):
    x, k = rng.normal(size=(2, 6, 6, 2)), rng.normal(size=(3, 3, 2, 2))
    grads = {}
    for b in ("numba", "numpy"):
        with _kernels.backend(b):
            xt, kt = t(x, True), t(k, True)
            y = L.conv2d(xt, kt, 1, 1)
            T.backward((y * y).sum())
            grads[b] = (xt.grad, kt.grad)
    for a, b in zip(grads["numba"], grads["numpy"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_conv_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        L.conv2d(t(np.ones((1, 2, 2, 1))), t(np.ones((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        L.conv2d(t(np.ones((1, 4, 4, 2))), t(np.ones((3, 3, 1, 1))))


# -- maxpool ---------------------------------------------------------------------

def test_maxpool_examples():
    x = np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1)
    assert L.maxpool2d(t(x)).data.reshape(-1).tolist() == [4.0]
    c = np.full((1, 6, 6, 2), 0.3)
    assert (L.maxpool2d(t(c)).data == 0.3).all()


@given(seed=st.integers(0, 10**6), window=st.integers(1, 3), stride=st.integers(1, 3))
def test_maxpool_matches_window_scan(seed, window, stride):
    x = np.random.default_rng(seed).normal(size=(2, 8, 8, 2))
    out = L.maxpool2d(t(x), window, stride).data
    oh = (8 - window) // stride + 1
    for b in range(2):
        for r in range(oh):
            for c in range(oh):
                for ch in range(2):
                    win = x[b, r * stride:r * stride + window, c * stride:c * stride + window, ch]
                    assert out[b, r, c, ch] == win.max()


def test_maxpool_gradient_goes_to_first_maximum():
    x = t(np.ones((1, 2, 2, 1)), True)
    T.backward(L.maxpool2d(x).sum())
    assert x.grad.reshape(-1).tolist() == [1, 0, 0, 0]


def test_maxpool_gradient(rng):
    x = t(rng.normal(size=(2, 6, 6, 2)), True)
    w = rng.normal(size=(2, 3, 3, 2))
    assert T.grad_check(lambda: (L.maxpool2d(x) * w).sum(), x) <= 1e-4


# -- layernorm -------------------------------------------------------------------

def test_layernorm_examples():
    g, b = t(np.ones(3)), t(np.zeros(3))
    assert np.array_equal(L.layernorm(t([[2.0, 2, 2]]), g, b).data, np.zeros((1, 3)))
    out = L.layernorm(t([[1.0, -1]]), t(np.ones(2)), t(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [[1, -1]], atol=1e-9)


def test_layernorm_gradients(rng):
    x = t(rng.normal(size=(3, 5)), True)
    g, b = t(rng.normal(size=5), True), t(rng.normal(size=5), True)
    w = rng.normal(size=(3, 5))
    assert T.grad_check(lambda: (L.layernorm(x, g, b) * w).sum(), [x, g, b]) <= 1e-4


# -- attention --------------------------------------------------------------------

def _attn_weights(rng, d):
    return [t(rng.normal(size=(d, d)) / math.sqrt(d), True) for _ in range(4)]


def test_single_token_attention_is_value_path(rng):
    x = rng.normal(size=(2, 1, 4))
    wq, wk, wv, wo = _attn_weights(rng, 4)
    out, weights = L.multi_head_attention(t(x), wq, wk, wv, wo, heads=2, return_weights=True)
    assert (weights.data == 1).all()
    np.testing.assert_allclose(out.data, x @ wv.data @ wo.data, rtol=1e-12)


def test_attention_rows_sum_to_one(rng):
    wq, wk, wv, wo = _attn_weights(rng, 8)
    _, weights = L.multi_head_attention(t(rng.normal(size=(2, 5, 8))), wq, wk, wv, wo, 4, True)
    np.testing.assert_allclose(weights.data.sum(-1), 1, atol=1e-6)


def test_single_head_matches_direct_formula(rng):
    x = rng.normal(size=(2, 3, 4))
    wq, wk, wv, wo = _attn_weights(rng, 4)
    out = L.multi_head_attention(t(x), wq, wk, wv, wo, heads=1).data
    for b in range(2):
        q, k, v = x[b] @ wq.data, x[b] @ wk.data, x[b] @ wv.data
        s = q @ k.T / 2.0
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        np.testing.assert_allclose(out[b], a @ v @ wo.data, rtol=1e-12, atol=1e-14)


@given(seed=st.integers(0, 10**6))
def test_attention_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 6, 4))
    ws = _attn_weights(rng, 4)
    perm = rng.permutation(6)
    a = L.multi_head_attention(t(x), *ws, heads=2).data
    b = L.multi_head_attention(t(x[:, perm]), *ws, heads=2).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-12)


def test_attention_gradients(rng):
    x = t(rng.normal(size=(2, 3, 4)), True)
    ws = _attn_weights(rng, 4)
    w = rng.normal(size=(2, 3, 4))
    assert T.grad_check(lambda: (L.multi_head_attention(x, *ws, heads=2) * w).sum(), [x, *ws]) <= 1e-4


def test_attention_head_divisibility():
    with pytest.raises(ConfigError):
        L.multi_head_attention(t(np.ones((1, 2, 6))), *[t(np.eye(6))] * 4, heads=4)


# -- patches ---------------------------------------------------------------------

def test_patch_counts():
    assert L.patchify(np.zeros((256, 256, 3)), 32).shape == (64, 3072)
    assert L.patchify(np.zeros((60, 80, 1)), 20).shape == (12, 400)


@given(gh=st.integers(1, 4), gw=st.integers(1, 4), p=st.integers(1, 4), c=st.integers(1, 3),
       seed=st.integers(0, 10**6))
def test_patch_split_is_a_partition(gh, gw, p, c, seed):
    img = np.random.default_rng(seed).normal(size=(gh * p, gw * p, c))
    patches = L.patchify(img, p).data
    assert np.array_equal(L.unpatchify(patches, p, gh * p, gw * p), img)
    # each pixel value appears exactly once across patches
    assert sorted(patches.reshape(-1)) == sorted(img.reshape(-1))


def test_patches_are_row_major_channel_fastest():
    img = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
    first = L.patchify(img, 2).data[1]
    assert first.tolist() == img[0:2, 2:4].reshape(-1).tolist()


def test_patch_embed_layout(rng):
    img = rng.normal(size=(8, 8, 3))
    Wp, pos, cls = rng.normal(size=(48, 5)), rng.normal(size=(5, 5)), rng.normal(size=5)
    seq = L.patch_embed(t(img), 4, t(Wp), t(pos), t(cls)).data
    assert seq.shape == (5, 5)
    np.testing.assert_allclose(seq[0], cls + pos[0])
    np.testing.assert_allclose(seq[1:], L.patchify(img, 4).data @ Wp + pos[1:], rtol=1e-12)


def test_patch_embed_rejects_bad_grid():
    with pytest.raises(ShapeError):
        L.patch_embed(t(np.ones((6, 6, 1))), 4, t(np.ones((16, 2))), t(np.ones((2, 2))), t(np.ones(2)))


def test_patch_embed_gradients(rng):
    img = t(rng.normal(size=(2, 4, 4, 2)), True)
    Wp, pos, cls = (t(rng.normal(size=s), True) for s in ((8, 3), (5, 3), (3,)))
    w = rng.normal(size=(2, 5, 3))
    assert T.grad_check(lambda: (L.patch_embed(img, 2, Wp, pos, cls) * w).sum(), [img, Wp, pos, cls]) <= 1e-4


# -- residual -------------------------------------------------------------------

def test_residual_identities(rng):
    x = t(rng.normal(size=(3, 4)))
    W = t(np.zeros((4, 4)))
    assert np.array_equal(L.residual(x, lambda z: L.dense(z, W)).data, x.data)
    assert np.array_equal(L.residual(x, lambda z: z).data, 2 * x.data)


def test_residual_gradient(rng):
    x = t(rng.normal(size=(3, 4)), True)
    W = t(rng.normal(size=(4, 4)), True)
    w = rng.normal(size=(3, 4))
    assert T.grad_check(lambda: (L.residual(x, lambda z: T.tanh(L.dense(z, W))) * w).sum(), [x, W]) <= 1e-4


def test_residual_shape_guard():
    with pytest.raises(ShapeError):
        L.residual(t(np.ones((2, 3))), lambda z: L.dense(z, t(np.ones((3, 2)))))


# -- factorized conv -------------------------------------------------------------

def test_factorized_matches_rank_one_kernel(rng):
    x = rng.normal(size=(1, 7, 6, 1))
    u = np.array([1.0, 2, 1]).reshape(3, 1, 1, 1)
    v = np.array([1.0, 0, -1]).reshape(1, 3, 1, 1)
    full = np.outer([1, 2, 1], [1, 0, -1]).reshape(3, 3, 1, 1).astype(float)
    got = L.factorized_conv(t(x), t(u), t(v)).data
    assert np.max(np.abs(got - direct_conv_oracle(x, full, 1, 1))) <= 1e-10


@given(n=st.sampled_from([3, 5]), cin=st.integers(1, 2), cout=st.integers(1, 2),
       stride=st.integers(1, 2), seed=st.integers(0, 10**6))
def test_factorized_equals_full_conv(n, cin, cout, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 7, 8, cin))
    u, v = rng.normal(size=(n, 1, cin, 1)), rng.normal(size=(1, n, 1, cout))
    full = u[:, 0, :, 0][:, None, :, None] * v[0, :, 0, :][None, :, None, :]
    got = L.factorized_conv(t(x), t(u), t(v), stride=stride).data
    ref = direct_conv_oracle(x, full, stride, n // 2)
    assert np.max(np.abs(got - ref)) <= 1e-10


def test_factorized_zero_kernels_give_zero(rng):
    out = L.factorized_conv(t(rng.normal(size=(1, 5, 5, 2))), t(np.zeros((3, 1, 2, 2))), t(np.zeros((1, 3, 2, 2))))
    assert not out.data.any()


@pytest.mark.parametrize("n", [3, 5, 7])
def test_factorized_uses_fewer_parameters(n):
    assert n * 1 + 1 * n < n * n


def test_factorized_gradients(rng):
    x = t(rng.normal(size=(1, 5, 5, 2)), True)
    u, v = t(rng.normal(size=(3, 1, 2, 2)), True), t(rng.normal(size=(1, 3, 2, 3)), True)
    w = rng.normal(size=(1, 5, 5, 3))
    assert T.grad_check(lambda: (L.factorized_conv(x, u, v) * w).sum(), [x, u, v]) <= 1e-4


# -- cross entropy ----------------------------------------------------------------

def test_cross_entropy_values():
    assert float(L.cross_entropy(t(np.zeros((1, 4))), [2]).data) == pytest.approx(math.log(4), abs=1e-12)
    loss = float(L.cross_entropy(t([[10.0, -10.0]]), [0]).data)
    assert math.isfinite(loss)
    assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    z = t(rng.normal(size=(3, 4)), True)
    y = np.array([0, 3, 1])
    T.backward(L.cross_entropy(z, y))
    p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
    p[np.arange(3), y] -= 1
    np.testing.assert_allclose(z.grad, p / 3, rtol=1e-12)
    assert T.grad_check(lambda: L.cross_entropy(z, y), z) <= 1e-5


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        L.cross_entropy(t(np.zeros((1, 3))), [3])

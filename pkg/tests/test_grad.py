import numpy as np
import pytest

from itx import attention as A
from itx import grad as G
from itx.model import Model, ModelConfig
from itx.tensorcore import WindowSpec

F64 = np.float64


def param(shape, name, seed=0, scale=1.0):
    return G.Parameter(np.random.default_rng(seed).standard_normal(shape) * scale, name)


def probe(shape, seed=99):
    """Random fixed weights so the scalar loss depends on every output entry."""
    return np.random.default_rng(seed).standard_normal(shape)


def weighted(y, w):
    return G.sum_all(G.mul(y, w))


def check(fn, params, tol=1e-4, **kw):
    err = G.finite_diff_check(fn, params, eps=1e-5, rel_floor=1e-6, **kw)
    assert err < tol, err


class TestHarness:
    def test_sum_gives_ones(self):
        x = param((3, 4), "x")
        np.testing.assert_array_equal(G.backward(G.sum_all(x))["x"], np.ones((3, 4)))

    def test_half_square_gives_x(self):
        x = param((5,), "x")
        np.testing.assert_allclose(G.backward(G.scale(G.sum_all(G.mul(x, x)), 0.5))["x"], x.data)

    def test_quadratic(self):
        x = param((6,), "x")
        w = probe((6,))
        assert G.finite_diff_check(lambda: weighted(G.mul(x, x), w), [x], eps=1e-4) < 1e-8

    def test_constant(self):
        x = param((3,), "x")
        assert G.finite_diff_check(lambda: G.scale(G.sum_all(G.mul(x, 0.0)), 1.0), [x]) == 0.0

    def test_attention_micro_net(self):
        dq, dk, dv = param((5, 4), "q", 0), param((5, 4), "k", 1), param((5, 4), "v", 2)
        p = probe((5, 4))
        err = G.finite_diff_check(lambda: weighted(A.scaled_attention(dq, dk, dv)[0], p), [dq, dk, dv],
                                  eps=1e-5)
        assert err < 1e-5

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            G.finite_diff_check(lambda: None, [], eps=0)

    def test_dropout_inference_is_identity(self):
        x = param((1, 1, 1, 2, 2), "x")
        assert G.dropout(x, 0.5, None, training=False) is x


class TestElementwise:
    def test_add_broadcast(self):
        a, b = param((2, 3, 4), "a"), param((3, 1), "b", 1)
        w = probe((2, 3, 4))
        check(lambda: weighted(G.add(a, b), w), [a, b])

    def test_mul_broadcast(self):
        a, b = param((2, 3, 4), "a"), param((4,), "b", 1)
        w = probe((2, 3, 4))
        check(lambda: weighted(G.mul(a, b), w), [a, b])

    def test_scale_and_sub(self):
        a, b = param((5,), "a"), param((5,), "b", 1)
        w = probe((5,))
        check(lambda: weighted((a - b) * 2.5, w), [a, b])

    def test_matmul_batched(self):
        a, b = param((2, 3, 4, 5), "a"), param((5, 6), "b", 1)
        w = probe((2, 3, 4, 6))
        check(lambda: weighted(G.matmul(a, b), w), [a, b])

    def test_softmax(self):
        a = param((3, 7), "a", scale=3)
        w = probe((3, 7))
        check(lambda: weighted(G.softmax(a), w), [a])

    def test_reshape_permute_transpose(self):
        a = param((2, 3, 4), "a")
        w = probe((3, 4, 2))
        check(lambda: weighted(G.transpose_last(G.reshape(G.permute(a, (1, 0, 2)), (3, 2, 4))), w), [a])

    def test_concat_split(self):
        a, b = param((2, 2, 3), "a"), param((2, 4, 3), "b", 1)
        w = probe((2, 2, 3))
        check(lambda: weighted(G.split(G.concat([a, b], axis=1), 3, axis=1)[1], w), [a, b])

    def test_take(self):
        t = param((2, 5), "t")
        idx = np.array([[0, 4, 4], [1, 1, 2]])
        w = probe((2, 2, 3))
        check(lambda: weighted(G.take(t, idx), w), [t])

    def test_mse(self):
        a, b = param((3, 4), "a"), param((3, 4), "b", 1)
        check(lambda: G.mse_loss(a, b), [a, b])


class TestTensorOps:
    def test_conv2d(self):
        x = param((2, 3, 2, 5, 4), "x")
        w, b = param((4, 3, 3, 3), "w", 1), param((4,), "b", 2)
        p = probe((2, 4, 2, 5, 4))
        check(lambda: weighted(G.conv2d(x, w, b), p), [x, w, b])

    def test_conv2d_no_bias(self):
        x, w = param((1, 2, 1, 3, 3), "x"), param((2, 2, 3, 3), "w", 1)
        p = probe((1, 2, 1, 3, 3))
        check(lambda: weighted(G.conv2d(x, w), p), [x, w])

    def test_layer_norm(self):
        x = param((2, 3, 2, 4, 4), "x", scale=2)
        g, b = param((3,), "g", 1), param((3,), "b", 2)
        p = probe((2, 3, 2, 4, 4))
        check(lambda: weighted(G.layer_norm(x, g, b), p), [x, g, b])

    def test_prelu(self):
        x = param((1, 3, 1, 4, 4), "x")
        x.data[np.abs(x.data) < 1e-3] = 0.5  # keep clear of the kink
        s = G.Parameter(np.array([0.25, -0.1, 0.7]), "s")
        p = probe((1, 3, 1, 4, 4))
        check(lambda: weighted(G.prelu(x, s), p), [x, s])

    def test_dropout_fixed_mask(self):
        x = param((1, 2, 1, 4, 4), "x")
        p = probe((1, 2, 1, 4, 4))
        check(lambda: weighted(G.dropout(x, 0.3, np.random.default_rng(5), True), p), [x])

    def test_patch_merge(self):
        x = param((1, 2, 2, 4, 6), "x")
        p = probe((1, 8, 2, 2, 3))
        check(lambda: weighted(G.patch_merge(x), p), [x])

    def test_upsample(self):
        x = param((1, 2, 1, 3, 4), "x")
        p = probe((1, 2, 1, 6, 8))
        check(lambda: weighted(G.upsample2x(x), p), [x])

    def test_pad_crop(self):
        ws = WindowSpec(4, 2)
        x = param((1, 1, 1, 5, 6), "x")
        p = probe((1, 1, 1, 8, 8))
        check(lambda: weighted(G.pad_to_window(x, ws)[0], p), [x])

        def cropped():
            y, rec = G.pad_to_window(x, ws)
            return weighted(G.crop(G.mul(y, y), rec), probe((1, 1, 1, 5, 6)))
        check(cropped, [x])

    @pytest.mark.parametrize("kind", ["local", "global"])
    def test_window_rows(self, kind):
        ws = WindowSpec(4, 2)
        x = param((1, 2, 2, 8, 4), "x")
        fwd, inv = (G.local_rows, G.local_unrows) if kind == "local" else (G.global_rows, G.global_unrows)
        rows_shape = fwd(x.data.copy(), ws).shape
        p = probe(rows_shape)
        check(lambda: weighted(fwd(x, ws), p), [x])
        r = param(rows_shape, "r", 3)
        q = probe(x.shape)
        check(lambda: weighted(inv(r, x.shape, ws), q), [r])

    def test_frame_rows(self):
        x = param((2, 2, 3, 2, 2), "x")
        p = probe((2, 3, 8))
        check(lambda: weighted(G.frame_rows(x), p), [x])
        r = param((2, 3, 8), "r", 3)
        q = probe(x.shape)
        check(lambda: weighted(G.frame_unrows(r, x.shape), q), [r])


def attn_params(C, heads, nbias, seed):
    rng = np.random.default_rng(seed)
    ps = {f"{n}.{k}": G.Parameter(rng.standard_normal((C, C, 3, 3) if k == "w" else (C,)) * 0.4, f"{n}.{k}")
          for n in "qkv" for k in "wb"}
    if nbias:
        ps["bias"] = G.Parameter(rng.standard_normal((heads, nbias)) * 0.5, "bias")
    return ps


@pytest.mark.parametrize("kind,shape,grid", [
    ("L", (1, 2, 1, 8, 8), (2, 2)),
    ("L", (1, 2, 1, 6, 7), (2, 2)),
    ("G", (1, 2, 1, 8, 8), (2, 2)),
    ("G", (1, 2, 1, 8, 12), (2, 3)),
    ("F", (1, 2, 3, 4, 4), (1, 1)),
])
def test_attention_mechanisms(kind, shape, grid):
    heads = 2
    cfg = A.AttentionConfig(kind, 2, heads, WindowSpec(4, 2), True, grid)
    params = attn_params(2, heads, cfg.bias_table_size() if cfg.use_bias else 0, 1)
    x = G.Parameter(np.random.default_rng(2).standard_normal(shape), "x")
    p = probe(shape)
    check(lambda: weighted(A.attend(x, cfg, params), p), [x, *params.values()])


def test_scaled_attention_with_bias():
    dq, dk, dv = param((2, 4, 6), "q", 0), param((2, 4, 6), "k", 1), param((2, 4, 6), "v", 2)
    bias = param((2, 4, 4), "bias", 3)
    p = probe((2, 4, 6))
    check(lambda: weighted(A.scaled_attention(dq, dk, dv, bias)[0], p), [dq, dk, dv, bias])


def test_backward_is_not_cumulative():
    a = param((3,), "a")
    g1 = G.backward(G.sum_all(G.mul(a, a)))["a"].copy()
    g2 = G.backward(G.sum_all(G.mul(a, a)))["a"]
    np.testing.assert_array_equal(g1, g2)


def test_backward_rejects_non_scalar():
    with pytest.raises(G.GradError):
        G.backward(G.add(param((2,), "a"), 1.0))


def test_backward_rejects_unrecorded():
    with G.no_grad():
        loss = G.sum_all(param((2,), "a"))
    with pytest.raises(G.GradError):
        G.backward(loss)


def test_no_grad_restores_state():
    with G.no_grad():
        pass
    assert G.sum_all(param((2,), "a")).requires_grad


# --- full desk model ------------------------------------------------------


def desk_model(dtype):
    m = Model(ModelConfig(C=16, block_spec="FLG", heads=2, dropout=0.0, image_size=(16, 16)), seed=3)
    rng = np.random.default_rng(11)
    # random LN / bias / slope values so no parameter sits on a degenerate point
    for name, p in m.params.items():
        if name.endswith(("ln1.g", "ln2.g")):
            p.data = (1 + 0.2 * rng.standard_normal(p.data.shape))
        elif name.endswith((".b", "attn.bias")):
            p.data = 0.1 * rng.standard_normal(p.data.shape)
    m.params.astype(dtype)
    return m


def desk_batch(dtype):
    rng = np.random.default_rng(12)
    return rng.standard_normal((1, 3, 4, 16, 16)).astype(dtype), rng.standard_normal((1, 2, 4, 16, 16)).astype(dtype)


def model_loss(m, x, y):
    return lambda: G.mse_loss(m.forward(x), y)


# eps 1e-6: small enough to stay clear of PReLU kinks, large enough that roundoff
# in the loss stays well below the tolerance for entries near the floor
MODEL_EPS = 1e-6
# (samples, rel_floor): the plain 20-coordinate check, then a wider sample in which
# entries below 1e-5 of the largest gradient are judged on absolute error
MODEL_CHECKS = [(20, 0.0), (150, 1e-5)]


@pytest.mark.parametrize("n,rel_floor", MODEL_CHECKS)
def test_desk_model_float64(n, rel_floor):
    m = desk_model(F64)
    x, y = desk_batch(F64)
    params = list(m.params.values())
    err = G.finite_diff_check(model_loss(m, x, y), params, eps=MODEL_EPS, n_samples=n,
                              rng=np.random.default_rng(0), rel_floor=rel_floor)
    assert err < 1e-4, err


@pytest.mark.parametrize("n,rel_floor", MODEL_CHECKS)
def test_desk_model_float32(n, rel_floor):
    # float32 analytic gradients against central differences of a float64 copy
    m32 = desk_model(np.float32)
    x, y = desk_batch(np.float32)
    grads = G.backward(G.mse_loss(m32.forward(x), y))
    m64 = desk_model(F64)
    m64.params.assign(m32.params.arrays())
    params = list(m64.params.values())
    err = G.finite_diff_check(model_loss(m64, x.astype(F64), y.astype(F64)), params, eps=MODEL_EPS,
                              n_samples=n, rng=np.random.default_rng(1), analytic=grads,
                              rel_floor=rel_floor)
    assert err < 1e-2, err

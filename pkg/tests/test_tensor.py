import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskseg import checkpoint
from deskseg import tensor as T
from deskseg.tensor import Tensor

TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def test_matmul_hand_cases():
    eye = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert T.gradcheck(lambda: T.tsum(T.matmul(a, b)), [a, b]) < 1e-6


def test_softmax_values():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12
    assert np.isfinite(out).all()


def test_softmax_masked_entries_are_exactly_zero():
    rng = np.random.default_rng(1)
    x = leaf(rng, 3, 5)
    mask = rng.random((3, 5)) > 0.4
    mask[:, 0] = True
    y = T.softmax(x, axis=-1, mask=mask).data
    assert (y[~mask] == 0.0).all()
    assert np.abs(y.sum(-1) - 1).max() < 1e-12
    with pytest.raises(ValueError):
        T.softmax(x, mask=np.zeros((3, 5), bool))


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.softmax(x, axis=-1), w)), [x]) < 1e-6
    assert T.gradcheck(lambda: T.tsum(T.mul(T.softmax(x, axis=0), w)), [x]) < 1e-6


def test_sigmoid_values_and_gradient():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    big = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert big[0] < 1e-12 and abs(big[1] - 1) < 1e-12 and np.isfinite(big).all()
    x = leaf(np.random.default_rng(3), 5)
    assert T.gradcheck(lambda: T.tsum(T.mul(T.sigmoid(x), x)), [x]) < 1e-6


def test_conv2d_hand_cases():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 4, 4)))
    ident = Tensor(np.eye(2).reshape(2, 2, 1, 1))
    np.testing.assert_array_equal(T.conv2d(x, ident).data, x.data)
    ones = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(ones.data, [[[9.0]]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (4, 0)])
def test_conv2d_geometry(stride, padding):
    x = Tensor(np.zeros((2, 8, 12)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    out = T.conv2d(x, w, stride=stride, padding=padding)
    assert out.shape == (3, (8 + 2 * padding - 3) // stride + 1, (12 + 2 * padding - 3) // stride + 1)


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(T.DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_gradient():
    rng = np.random.default_rng(5)
    x, w, b = leaf(rng, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    r = rng.normal(size=(3, 3, 3))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.conv2d(x, w, b, stride=2, padding=1), r)), [x, w, b]) < 1e-6


def test_conv_transpose_geometry_and_gradient():
    rng = np.random.default_rng(6)
    x = leaf(rng, 3, 4, 4)
    w, b = leaf(rng, 3, 2, 2, 2), leaf(rng, 2)
    assert T.conv_transpose2d(x, w, b).shape == (2, 8, 8)
    w2 = Tensor(rng.normal(size=(2, 2, 2, 2)))
    big = T.conv_transpose2d(T.conv_transpose2d(Tensor(np.zeros((3, 16, 16))), w), w2)
    assert big.shape == (2, 64, 64)
    r = rng.normal(size=(2, 8, 8))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.conv_transpose2d(x, w, b), r)), [x, w, b]) < 1e-6


def test_conv_transpose_matches_scatter_definition():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(2, 4, 2, 2))
    want = np.zeros((4, 6, 6))
    for ci in range(2):
        for i in range(3):
            for j in range(3):
                want[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] += x[ci, i, j] * w[ci]
    np.testing.assert_allclose(T.conv_transpose2d(Tensor(x), Tensor(w)).data, want, atol=1e-12)


def test_conv_transpose_rejects_other_geometry():
    with pytest.raises(T.ConfigurationError):
        T.conv_transpose2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_interpolate_identity_constant_and_nearest():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 5, 7)))
    for mode in ("nearest", "bilinear"):
        np.testing.assert_array_equal(T.interpolate(x, 5, 7, mode).data, x.data)
        const = T.interpolate(Tensor(np.full((1, 3, 4), 2.5)), 7, 9, mode).data
        assert np.abs(const - 2.5).max() < 1e-12
    near = T.interpolate(Tensor([[[0.0, 1.0], [2.0, 3.0]]]), 4, 4, "nearest").data[0]
    np.testing.assert_array_equal(near, np.kron([[0, 1], [2, 3]], np.ones((2, 2))))
    with pytest.raises(T.DimensionError):
        T.interpolate(x, 0, 3)


def test_bilinear_uses_half_pixel_centres():
    # 2 -> 4 upsampling: output centres map to -0.25, 0.25, 0.75, 1.25 (clamped)
    out = T.interpolate(Tensor([[[0.0, 1.0]]]), 1, 4, "bilinear").data[0, 0]
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0])


def test_interpolate_gradient():
    rng = np.random.default_rng(9)
    x = leaf(rng, 2, 3, 5)
    r = rng.normal(size=(2, 7, 4))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.interpolate(x, 7, 4, "bilinear"), r)), [x]) < 1e-6


def test_backward_simple_cases():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x.zero_grad()
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(T.mul(x, x), 3.0))
    T.backward(loss)
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [12.0, 24.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.mul(x, 2.0))


def test_layer_norm_gradient_on_channel_axis():
    rng = np.random.default_rng(10)
    x, w, b = leaf(rng, 4, 3, 3), leaf(rng, 4), leaf(rng, 4)
    r = rng.normal(size=(4, 3, 3))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.layer_norm(x, w, b, axis=0), r)), [x, w, b]) < 1e-6


@given(st.lists(st.integers(1, 5), min_size=3, max_size=3))
def test_flatten_unflatten_is_exact_identity(shape):
    c, h, w = shape
    x = Tensor(np.random.default_rng(c * 31 + h * 7 + w).normal(size=(c, h, w)))
    tokens = T.flatten_spatial(x)
    assert tokens.shape == (h * w, c)
    np.testing.assert_array_equal(T.unflatten_spatial(tokens, h, w).data, x.data)


def test_ops_are_deterministic():
    rng = np.random.default_rng(11)
    x, w = rng.normal(size=(3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# random sweep: every differentiable op on 50 random micro-shapes


def _op_cases():
    def unary(fn):
        def build(rng):
            x = leaf(rng, *rng.integers(1, 4, size=2))
            r = rng.normal(size=x.shape)
            return (lambda: T.tsum(T.mul(fn(x), r))), [x]

        return build

    def binary(fn):
        def build(rng):
            shape = tuple(rng.integers(1, 4, size=2))
            a, b = leaf(rng, *shape), leaf(rng, 1, shape[1])
            b.data += 3.0 * np.sign(b.data)  # keep divisors away from zero
            return (lambda: T.tsum(fn(a, b))), [a, b]

        return build

    def matmul(rng):
        m, k, n = rng.integers(1, 4, size=3)
        a, b = leaf(rng, m, k), leaf(rng, k, n)
        return (lambda: T.tsum(T.sigmoid(T.matmul(a, b)))), [a, b]

    def conv(rng):
        cin, cout = rng.integers(1, 3, size=2)
        h, w = rng.integers(3, 6, size=2)
        k = int(rng.integers(1, 4))
        x, wt, b = leaf(rng, cin, h, w), leaf(rng, cout, cin, k, k), leaf(rng, cout)
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        return (lambda: T.tsum(T.sigmoid(T.conv2d(x, wt, b, s, p)))), [x, wt, b]

    def tconv(rng):
        cin, cout, h, w = rng.integers(1, 4, size=4)
        x, wt, b = leaf(rng, cin, h, w), leaf(rng, cin, cout, 2, 2), leaf(rng, cout)
        return (lambda: T.tsum(T.sigmoid(T.conv_transpose2d(x, wt, b)))), [x, wt, b]

    def interp(rng):
        x = leaf(rng, 2, *rng.integers(1, 5, size=2))
        th, tw = rng.integers(1, 7, size=2)
        mode = ["nearest", "bilinear"][int(rng.integers(2))]
        return (lambda: T.tsum(T.sigmoid(T.interpolate(x, int(th), int(tw), mode)))), [x]

    def lnorm(rng):
        x = leaf(rng, *rng.integers(2, 5, size=2))
        w, b = leaf(rng, x.shape[1]), leaf(rng, x.shape[1])
        return (lambda: T.tsum(T.sigmoid(T.layer_norm(x, w, b)))), [x, w, b]

    def smax(rng):
        x = leaf(rng, *rng.integers(1, 5, size=2))
        r = rng.normal(size=x.shape)
        mask = rng.random(x.shape) > 0.3
        mask[:, 0] = True
        return (lambda: T.tsum(T.mul(T.softmax(x, -1, mask), r))), [x]

    def logsmax(rng):
        x = leaf(rng, *rng.integers(1, 5, size=2))
        r = rng.normal(size=x.shape)
        return (lambda: T.tsum(T.mul(T.log_softmax(x, -1), r))), [x]

    def shape_ops(rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
        return (
            lambda: T.tsum(
                T.sigmoid(T.transpose(T.concat([a, b], axis=1)))
                * T.mean(T.reshape(T.getitem(T.concat([a, b], 1), (slice(None), slice(1, 4))), (3, 2)))
            )
        ), [a, b]

    def channel_dot(rng):
        q, e = leaf(rng, 3, 4), leaf(rng, 4, 2, 3)
        return (lambda: T.tsum(T.sigmoid(T.channel_dot(q, e)))), [q, e]

    return {
        "add": binary(T.add),
        "mul": binary(T.mul),
        "sub": binary(T.sub),
        "div": binary(T.div),
        "relu": unary(lambda x: T.relu(T.add(x, 0.1))),
        "sigmoid": unary(T.sigmoid),
        "softplus": unary(T.softplus),
        "exp": unary(T.exp),
        "matmul": matmul,
        "conv2d": conv,
        "conv_transpose2d": tconv,
        "interpolate": interp,
        "layer_norm": lnorm,
        "softmax": smax,
        "log_softmax": logsmax,
        "shape_ops": shape_ops,
        "channel_dot": channel_dot,
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_random_gradient_sweep(name):
    build = _op_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(50):
        fn, inputs = build(rng)
        assert T.gradcheck(fn, inputs, h=1e-5) < TOL


# ---------------------------------------------------------------------------
# checkpoint container


@settings(max_examples=30)
@given(st.dictionaries(st.text("abc.", min_size=1, max_size=8), st.lists(st.integers(1, 4), max_size=3), max_size=5))
def test_checkpoint_round_trip_is_bit_exact(spec):
    rng = np.random.default_rng(len(spec))
    arrays = {k: rng.normal(size=tuple(s)) for k, s in spec.items()}
    blob = checkpoint.dumps(arrays, {"epoch": 3})
    back, meta = checkpoint.loads(blob)
    assert meta == {"epoch": 3}
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == np.ascontiguousarray(arrays[k]).tobytes()
    assert checkpoint.dumps(back, meta) == blob


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"nope")
    blob = checkpoint.dumps({"a": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-4])

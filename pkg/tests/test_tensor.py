import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scngait import tensor as T


def t(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def kinkfree(rng, shape, margin=0.1):
    """Random values kept away from 0 so abs/relu kinks stay out of reach."""
    x = rng.uniform(margin, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return x * sign


# ---------------------------------------------------------------------------
# hand examples


def test_conv2d_identity_kernel():
    x = t(np.arange(9.0).reshape(1, 3, 3))
    k = t(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(0)
    x = t(rng.standard_normal((2, 5, 4)))
    k = t(np.zeros((3, 2, 3, 3)))
    out = T.conv2d(x, k, stride=1, padding=1)
    assert out.shape == (3, 5, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv2d_hand_sum():
    x = t([[[1.0, 2.0], [3.0, 4.0]]])
    k = t([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = T.conv2d(x, k, stride=1, padding=0)
    assert out.shape == (1, 1, 1)
    assert out.item() == 5.0


def test_conv2d_channel_mismatch_names_axis():
    x = t(np.zeros((2, 4, 4)))
    k = t(np.zeros((1, 3, 3, 3)))
    with pytest.raises(T.DimensionError, match="axis 1"):
        T.conv2d(x, k, stride=1, padding=1)


def test_conv2d_output_shape_formula():
    x = t(np.zeros((1, 7, 9)))
    k = t(np.zeros((2, 1, 3, 3)))
    out = T.conv2d(x, k, stride=2, padding=1)
    assert out.shape == (2, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv3d_t3_identity_center():
    rng = np.random.default_rng(1)
    n, C = 4, 3
    x = t(rng.standard_normal((n, C, 2, 2)))
    k = np.zeros((C, C, 3, 1, 1))
    k[:, :, 1, 0, 0] = np.eye(C)
    out = T.conv3d_t3(x, t(k))
    np.testing.assert_allclose(out.data, x.data, atol=0)


def test_conv3d_t3_single_frame_all_ones():
    x = t(np.full((1, 1, 2, 3), 2.5))
    k = t(np.ones((1, 1, 3, 1, 1)))
    out = T.conv3d_t3(x, k)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv3d_t3_padded_sums():
    x = t(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1))
    k = t(np.ones((1, 1, 3, 1, 1)))
    out = T.conv3d_t3(x, k)
    np.testing.assert_array_equal(out.data.reshape(-1), [3.0, 6.0, 5.0])


def test_reduce_median_odd():
    assert T.reduce(t([1.0, 2.0, 9.0]), 0, "median").item() == 2.0


def test_reduce_median_even():
    assert T.reduce(t([1.0, 2.0, 3.0, 10.0]), 0, "median").item() == 2.5


def test_reduce_max():
    assert T.reduce(t([-1.0, 0.0, 4.0]), 0, "max").item() == 4.0


def test_reduce_empty_axis():
    with pytest.raises(T.EmptyReductionError):
        T.reduce(t(np.zeros((0, 3))), 0, "mean")


def test_elementwise_examples():
    np.testing.assert_array_equal(T.absolute(t([-2.0, 3.0])).data, [2.0, 3.0])
    assert T.leaky_relu(t([-1.0]), 0.01).data[0] == -0.01
    np.testing.assert_array_equal(T.scalar_mul(t([1.0, 2.0]), 0.5).data, [0.5, 1.0])


def test_add_bad_shapes():
    with pytest.raises(T.DimensionError):
        T.add(t(np.zeros((2, 3))), t(np.zeros((4, 5))))


def test_max_pool_examples():
    out = T.max_pool2x2(t([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.data.reshape(-1)[0] == 4.0
    const = T.max_pool2x2(t(np.full((2, 4, 6), 7.0)))
    assert const.shape == (2, 2, 3)
    np.testing.assert_array_equal(const.data, 7.0)


def test_max_pool_tie_routes_first_index():
    x = t(np.full((1, 2, 2), 4.0), grad=True)
    with T.Tape() as tape:
        out = T.max_pool2x2(x)
        tape.backward(out)
    np.testing.assert_array_equal(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_odd_dims_rejected():
    with pytest.raises(T.DimensionError):
        T.max_pool2x2(t(np.zeros((1, 3, 4))))


# ---------------------------------------------------------------------------
# oracle agreement and linearity


def test_conv2d_matches_scalar_reference():
    rng = np.random.default_rng(7)
    for stride, padding, kh in [(1, 1, 3), (1, 0, 2), (2, 1, 3), (1, 0, 1), (3, 2, 3)]:
        x = rng.standard_normal((3, 8, 6))
        k = rng.standard_normal((4, 3, kh, kh))
        got = T.conv2d(t(x), t(k), stride=stride, padding=padding).data
        want = T.conv2d_reference(x, k, stride=stride, padding=padding)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_batched_matches_per_frame():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 2, 6, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(t(x), t(k), stride=1, padding=1).data
    for i in range(5):
        np.testing.assert_allclose(
            got[i], T.conv2d(t(x[i]), t(k), stride=1, padding=1).data, atol=1e-12
        )


def test_conv2d_linearity():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 6, 6))
    y = rng.standard_normal((2, 6, 6))
    k = t(rng.standard_normal((3, 2, 3, 3)))
    a, b = 1.7, -0.4
    lhs = T.conv2d(t(a * x + b * y), k, 1, 1).data
    rhs = a * T.conv2d(t(x), k, 1, 1).data + b * T.conv2d(t(y), k, 1, 1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients


def scalar_wrap(op, rng, weight_shape):
    """Project op output to a scalar with a fixed random weighting."""
    w = rng.standard_normal(weight_shape)

    def fn(x):
        out = op(x)
        return T.sum_all(T.mul(out, T.Tensor(w)))

    return fn


@pytest.mark.parametrize(
    "name,op,shape,out_shape",
    [
        ("abs", lambda x: T.absolute(x), (3, 4), (3, 4)),
        ("leaky_relu", lambda x: T.leaky_relu(x, 0.01), (3, 4), (3, 4)),
        ("sqrt", lambda x: T.sqrt(T.mul(x, x)), (3, 4), (3, 4)),
        ("mean", lambda x: T.reduce(x, 0, "mean"), (5, 3), (3,)),
        ("max", lambda x: T.reduce(x, 0, "max"), (5, 3), (3,)),
        ("median_odd", lambda x: T.reduce(x, 0, "median"), (5, 3), (3,)),
        ("median_even", lambda x: T.reduce(x, 0, "median"), (4, 3), (3,)),
        ("pool", lambda x: T.max_pool2x2(x), (2, 4, 6), (2, 2, 3)),
        ("narrow", lambda x: T.narrow(x, 0, 1, 2), (4, 3), (2, 3)),
        ("reshape", lambda x: T.reshape(x, (12,)), (3, 4), (12,)),
    ],
)
def test_grad_check_per_op(name, op, shape, out_shape):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = T.Tensor(kinkfree(rng, shape))
    err = T.grad_check(scalar_wrap(op, rng, out_shape), x, h=1e-5)
    assert err <= 1e-6, f"{name}: rel err {err}"


def test_grad_check_conv_ops():
    rng = np.random.default_rng(11)
    x = T.Tensor(kinkfree(rng, (2, 3, 6, 4)))
    kd = rng.standard_normal((3, 3, 3, 3))
    err = T.grad_check(
        scalar_wrap(lambda v: T.conv2d(v, T.Tensor(kd), 1, 1), rng, (2, 3, 6, 4)), x
    )
    assert err <= 1e-6
    k = T.Tensor(kd)
    xd = T.Tensor(kinkfree(rng, (2, 3, 6, 4)))
    err = T.grad_check(
        scalar_wrap(lambda v: T.conv2d(xd, v, 1, 1), rng, (2, 3, 6, 4)), k
    )
    assert err <= 1e-6
    k3 = T.Tensor(rng.standard_normal((3, 3, 3, 1, 1)))
    err = T.grad_check(scalar_wrap(lambda v: T.conv3d_t3(v, k3), rng, (2, 3, 6, 4)), xd)
    assert err <= 1e-6
    err = T.grad_check(
        scalar_wrap(lambda v: T.conv3d_t3(xd, v), rng, (2, 3, 6, 4)), k3
    )
    assert err <= 1e-6


def test_grad_check_strided_conv():
    rng = np.random.default_rng(12)
    x = T.Tensor(kinkfree(rng, (1, 2, 6, 8)))
    kd = T.Tensor(rng.standard_normal((2, 2, 3, 3)))
    err = T.grad_check(
        scalar_wrap(lambda v: T.conv2d(v, kd, stride=2, padding=1), rng, (1, 2, 3, 4)), x
    )
    assert err <= 1e-6


def test_grad_check_linear_map_tight():
    x = T.Tensor(np.array([1.0, -2.0, 3.0]))
    err = T.grad_check(lambda v: T.sum_all(T.scalar_mul(v, 2.0)), x, h=1e-5)
    assert err < 1e-10


def test_grad_check_abs_away_from_kink():
    x = T.Tensor(np.array([1.5, 2.0, 3.25]))
    err = T.grad_check(lambda v: T.sum_all(T.absolute(v)), x, h=1e-5)
    assert err < 1e-6


def test_grad_check_nonfinite_detection():
    big = T.Tensor(np.array([1e308]))

    def fn(v):
        return T.sum_all(T.mul(big, T.mul(v, v)))

    with np.errstate(over="ignore"), pytest.raises(T.NumericError):
        T.grad_check(fn, T.Tensor(np.array([1e10])))


def test_backward_zero_seed_gives_zero_grads():
    x = t(np.array([1.0, -2.0]), grad=True)
    with T.Tape() as tape:
        out = T.mul(T.absolute(x), T.Tensor(np.array([3.0, 4.0])))
        tape.backward(out, seed=np.zeros(2))
    np.testing.assert_array_equal(x.grad, 0.0)


def test_matmul_grad():
    rng = np.random.default_rng(13)
    a = T.Tensor(rng.standard_normal((3, 4)))
    bd = rng.standard_normal((4, 2))
    err = T.grad_check(scalar_wrap(lambda v: T.matmul(v, T.Tensor(bd)), rng, (3, 2)), a)
    assert err <= 1e-6


def test_concat_and_maximum_grads():
    rng = np.random.default_rng(14)
    other = T.Tensor(kinkfree(rng, (3, 2)))

    def fn_cat(v):
        return T.sum_all(T.concat([v, other], axis=0))

    x = T.Tensor(kinkfree(rng, (2, 2)))
    assert T.grad_check(fn_cat, x) <= 1e-6

    o2 = T.Tensor(kinkfree(rng, (3, 2)))

    def fn_max(v):
        return T.sum_all(T.maximum(v, o2))

    y = T.Tensor(kinkfree(rng, (3, 2)) + 5.0)  # clear of ties
    assert T.grad_check(fn_max, y) <= 1e-6


# ---------------------------------------------------------------------------
# invariants


def test_determinism_bitwise():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((4, 8, 16, 12))
    k = rng.standard_normal((8, 8, 3, 3))
    a = T.conv2d(t(x), t(k), 1, 1).data
    b = T.conv2d(t(x.copy()), t(k.copy()), 1, 1).data
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=7),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_reduce_consistency(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    c = np.full((n, 2), 3.75)
    np.testing.assert_array_equal(T.reduce(t(c), 0, "mean").data, 3.75)
    assert (T.reduce(t(x), 0, "max").data >= T.reduce(t(x), 0, "mean").data - 1e-12).all()


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_median_matches_numpy(rows, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, 4))
    np.testing.assert_allclose(
        T.reduce(t(x), 0, "median").data, np.median(x, axis=0), atol=1e-12
    )


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((3, 4, 8, 6)) * 1e3
    k = rng.standard_normal((4, 4, 3, 3))
    out = T.conv2d(t(x), t(k), 1, 1)
    assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# snapshot format


def test_snapshot_roundtrip():
    rng = np.random.default_rng(23)
    arr = rng.standard_normal((3, 2, 5))
    buf = io.BytesIO()
    T.save_snapshot(buf, arr)
    buf.seek(0)
    header = buf.readline()
    assert header == b"shape: 3 2 5\n"
    buf.seek(0)
    back = T.load_snapshot(buf)
    np.testing.assert_array_equal(back, arr)


def test_snapshot_scalar_and_truncation():
    buf = io.BytesIO()
    T.save_snapshot(buf, np.array(4.25))
    buf.seek(0)
    assert T.load_snapshot(buf) == 4.25
    with pytest.raises(ValueError):
        T.load_snapshot(io.BytesIO(b"shape: 4\n\x00\x00"))

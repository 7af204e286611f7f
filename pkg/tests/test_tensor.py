import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdistill import tensor as T
from spdistill.errors import NumericError, ShapeError
from spdistill.tensor import Tensor, grad_check

GRAD_TOL = 1e-4


def randt(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity(rng):
    m = randt(rng, 2, 2, requires_grad=False)
    eye = Tensor(np.eye(2))
    assert np.allclose(T.matmul(eye, m).data, m.data)


def test_matmul_hand_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_grad_is_ones_times_bt(rng):
    a = randt(rng, 3, 4)
    b = randt(rng, 4, 5, requires_grad=False)
    out = T.matmul(a, b).sum()
    out.backward()
    expected = np.ones((3, 5)) @ b.data.T
    assert np.allclose(a.grad, expected)
    assert grad_check(lambda t: T.matmul(t, b).sum(), a) < 1e-6


def test_matmul_shape_error_names_both_shapes(rng):
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 4\)"):
        T.matmul(randt(rng, 3, 4), randt(rng, 3, 4))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_all_ones_gives_nine():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_1x1_kernel_scales(rng):
    x = randt(rng, 2, 1, 4, 4, requires_grad=False)
    w = Tensor(np.full((1, 1, 1, 1), 2.0))
    out = T.conv2d(x, w)
    assert np.allclose(out.data, 2.0 * x.data)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients_match_finite_differences(rng, stride, padding):
    x = randt(rng, 2, 3, 5, 5)
    w = randt(rng, 4, 3, 3, 3)
    assert grad_check(
        lambda t: (T.conv2d(t, w, stride, padding) ** 2).sum(), x
    ) < 1e-5
    assert grad_check(
        lambda t: (T.conv2d(x, t, stride, padding) ** 2).sum(), w
    ) < 1e-5


def test_conv2d_output_extent_error(rng):
    with pytest.raises(ShapeError):
        T.conv2d(randt(rng, 1, 1, 2, 2), randt(rng, 1, 1, 3, 3), 1, 0)


def test_conv2d_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        T.conv2d(randt(rng, 1, 2, 5, 5), randt(rng, 1, 3, 3, 3))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    for temp in (0.5, 1.0, 7.0):
        out = T.softmax(Tensor([[0.0, 0.0]]), temp)
        assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_hand_value():
    out = T.softmax(Tensor([[np.log(1.0), np.log(3.0)]]), 1.0)
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_high_temperature_approaches_uniform():
    out = T.softmax(Tensor([[0.0, 10.0]]), 1000.0)
    assert np.all(np.abs(out.data - 0.5) < 0.01)


def test_softmax_rows_sum_to_one_and_positive(rng):
    z = randt(rng, 20, 9, requires_grad=False)
    out = T.softmax(z, 4.0)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out.data > 0)


def test_softmax_rejects_nonfinite_and_bad_temperature():
    with pytest.raises(NumericError):
        T.softmax(Tensor([[np.nan, 0.0]]), 1.0)
    with pytest.raises(ValueError):
        T.softmax(Tensor([[0.0, 0.0]]), 0.0)


def test_softmax_stable_at_huge_logits():
    out = T.softmax(Tensor([[1e6, 0.0]]), 1.0)
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] == pytest.approx(1.0)


def test_log_softmax_matches_log_of_softmax(rng):
    z = randt(rng, 6, 5, requires_grad=False)
    assert np.allclose(T.log_softmax(z).data, np.log(T.softmax(z, 1.0).data))


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_sum_is_exact(rng):
    x = randt(rng, 3, 3)
    assert grad_check(lambda t: t.sum(), x) < 1e-10


def test_grad_check_requires_float64():
    x = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), x)


# ---------------------------------------------------------------------------
# remaining ops, each against finite differences
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,fn,shape", [
    ("relu", lambda t: (T.relu(t) * T.relu(t)).sum(), (4, 5)),
    ("avg_pool", lambda t: (T.avg_pool2d(t, 2) ** 2).sum(), (2, 3, 4, 4)),
    ("log_softmax", lambda t: (T.log_softmax(t) ** 2).sum(), (4, 6)),
    ("softmax", lambda t: (T.softmax(t, 3.0) ** 2).sum(), (4, 6)),
    ("reshape", lambda t: (t.reshape(6, 4) ** 2).sum(), (2, 3, 4)),
    ("add", lambda t: ((t + t * 0.5) ** 2).sum(), (3, 4)),
    ("mul", lambda t: ((t * t) ** 2).sum(), (3, 4)),
    ("scale", lambda t: (3.5 * t).sum(), (3, 4)),
    ("sub", lambda t: ((t - 2.0 * t) ** 2).sum(), (3, 4)),
    ("mean", lambda t: (t.mean(axis=1) ** 2).sum(), (3, 4)),
    ("sum_axis", lambda t: (t.sum(axis=0) ** 2).sum(), (3, 4)),
    ("transpose", lambda t: (T.transpose(t) @ t).sum(), (3, 4)),
    ("permute", lambda t: (T.permute(t, (2, 0, 1)) ** 2).sum(), (2, 3, 4)),
    ("row_norm", lambda t: (T.row_l2_normalize(t) ** 3).sum(), (4, 6)),
    ("sqrt", lambda t: T.sqrt((t * t).sum(axis=1)).sum(), (4, 6)),
    ("linear", lambda t: (T.linear(t, Tensor(np.eye(4) * 1.5), Tensor(np.ones(4))) ** 2).sum(), (3, 4)),
])
def test_op_gradients(rng, name, fn, shape):
    x = randt(rng, *shape)
    assert grad_check(fn, x) < GRAD_TOL, name


def test_fused_conv_matches_reference_and_gradients(rng):
    x = randt(rng, 2, 3, 8, 8)
    w = randt(rng, 4, 3, 3, 3)
    b = randt(rng, 4)
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        ref = T.relu(
            T.conv2d(x, w, stride, pad) + T.reshape(b, (1, 4, 1, 1))
        )
        fused = T.permute(
            T.conv_bias_relu_nhwc(T.permute(x, (0, 2, 3, 1)), w, b, stride, pad),
            (0, 3, 1, 2),
        )
        assert np.allclose(ref.data, fused.data, atol=1e-12)
    def loss(t):
        return (T.conv_bias_relu_nhwc(T.permute(t, (0, 2, 3, 1)), w, b, 1, 1) ** 2).sum()
    assert grad_check(loss, x) < GRAD_TOL
    def loss_w(t):
        return (T.conv_bias_relu_nhwc(T.permute(x, (0, 2, 3, 1)), t, b, 1, 1) ** 2).sum()
    assert grad_check(loss_w, w) < GRAD_TOL
    def loss_b(t):
        return (T.conv_bias_relu_nhwc(T.permute(x, (0, 2, 3, 1)), w, t, 2, 1) ** 2).sum()
    assert grad_check(loss_b, b) < GRAD_TOL


# transposed-conv backward branch kicks in at spatial extents >= 16
def test_fused_conv_large_spatial_gradient(rng):
    x = randt(rng, 1, 2, 16, 16)
    w = randt(rng, 3, 2, 3, 3)
    b = randt(rng, 3)
    def loss(t):
        return (T.conv_bias_relu_nhwc(T.permute(t, (0, 2, 3, 1)), w, b, 1, 1) ** 2).sum()
    assert grad_check(loss, x) < GRAD_TOL


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------

@given(st.lists(st.floats(-100, 100), min_size=12, max_size=12))
@settings(max_examples=30, deadline=None)
def test_reshape_round_trip_preserves_content(values):
    x = Tensor(np.array(values).reshape(3, 4))
    back = x.reshape(2, 6).reshape(12).reshape(3, 4)
    assert np.array_equal(back.data, x.data)


def test_gradient_accumulation_matches_duplicated_inputs(rng):
    data = rng.normal(size=(3, 3))
    shared = Tensor(data.copy(), requires_grad=True)
    (shared * shared).sum().backward()

    a = Tensor(data.copy(), requires_grad=True)
    b = Tensor(data.copy(), requires_grad=True)
    (a * b).sum().backward()
    assert np.allclose(shared.grad, a.grad + b.grad)


def test_backward_needs_scalar(rng):
    x = randt(rng, 2, 2)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_repeated_backward_accumulates(rng):
    x = randt(rng, 2, 2)
    loss = x.sum()
    loss.backward()
    first = x.grad.copy()
    loss2 = x.sum()
    loss2.backward()
    assert np.allclose(x.grad, 2 * first)


def test_detach_blocks_gradients(rng):
    x = randt(rng, 2, 2)
    (x.detach() * 3.0).sum()
    y = (x.detach() * x).sum()
    y.backward()
    assert np.allclose(x.grad, x.data)


def test_avg_pool_requires_divisible_extents(rng):
    with pytest.raises(ShapeError):
        T.avg_pool2d(randt(rng, 1, 1, 5, 5), 2)


def test_sqrt_zero_has_finite_subgradient():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    T.sqrt(x).sum().backward()
    assert np.all(np.isfinite(x.grad))
    with pytest.raises(NumericError):
        T.sqrt(Tensor([[-1.0]]))


def test_row_l2_normalize_zero_row_stays_zero():
    x = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]), requires_grad=True)
    out = T.row_l2_normalize(x)
    assert np.allclose(out.data[0], [0.6, 0.8])
    assert np.array_equal(out.data[1], [0.0, 0.0])
    out.sum().backward()
    assert np.all(np.isfinite(x.grad))
    assert np.array_equal(x.grad[1], [0.0, 0.0])

import numpy as np
import pytest

from precoder.tensor import (
    NumericError,
    Tape,
    Tensor,
    backward,
    clamp_max,
    concat_channels,
    conv2d,
    get_dtype,
    hard_sigmoid,
    max_pool2,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    scale,
    sub,
    sum,
    upsample2_nearest,
    zero_grad,
)
from precoder.verify import op_gradient_checks


def test_conv2d_pointwise_scale():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.array([0.5])))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.5))


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).uniform(size=(1, 1, 3, 3))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1
    out = conv2d(Tensor(x), Tensor(kernel), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, Tensor(x).data)


def test_conv2d_same_padding_sums_neighbours():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))))
    expected = [[4, 6, 4], [6, 9, 6], [4, 6, 4]]
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_conv2d_rejects_mismatches():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.ones((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(2)))


def test_max_pool2():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(max_pool2(x).data, [[[[4.0]]]])
    constant = max_pool2(Tensor(np.full((1, 2, 4, 6), 0.25)))
    np.testing.assert_array_equal(constant.data, np.full((1, 2, 2, 3), 0.25))
    with pytest.raises(ValueError):
        max_pool2(Tensor(np.ones((1, 1, 3, 4))))


def test_max_pool2_routes_ties_to_first_cell():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape():
        backward(sum(max_pool2(x)))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_upsample2_nearest():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    with Tape():
        out = upsample2_nearest(x)
        backward(sum(out))
    np.testing.assert_array_equal(out.data[0, 0], expected)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_upsample_then_pool_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
    up = upsample2_nearest(Tensor(x))
    np.testing.assert_array_equal(max_pool2(up).data, Tensor(x).data)
    np.testing.assert_array_equal(upsample2_nearest(max_pool2(up)).data, up.data)


def test_hard_sigmoid_pieces():
    out = hard_sigmoid(Tensor(np.array([0.0, 2.5, -2.5, 5.0, 1.0])))
    np.testing.assert_allclose(out.data, [0.5, 1.0, 0.0, 1.0, 0.7], rtol=1e-6)


def test_clamp_max_gradient():
    x = Tensor(np.array([0.2, 1.0, 1.5]), requires_grad=True)
    with Tape():
        out = clamp_max(x, 1.0)
        backward(sum(out))
    np.testing.assert_array_equal(out.data, np.array([0.2, 1.0, 1.0], dtype=np.float32))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


def test_concat_and_perfect_prediction_errors():
    a = Tensor(np.random.default_rng(2).uniform(size=(2, 3, 4, 4)))
    merged = concat_channels([a, a])
    assert merged.shape == (2, 6, 4, 4)
    np.testing.assert_array_equal(merged.data[:, :3], a.data)
    errors = relu(concat_channels([sub(a, a), sub(a, a)]))
    assert not errors.data.any()
    with pytest.raises(ValueError):
        concat_channels([a, Tensor(np.ones((2, 3, 4, 2)))])


def test_elementwise_shape_mismatch():
    with pytest.raises(ValueError):
        mul(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_backward_analytic_gradients():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape():
        backward(sum(mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    y = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with Tape():
        backward(sum(relu(y)))
    np.testing.assert_array_equal(y.grad, [0.0, 1.0])


def test_relu_gradient_is_zero_at_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with Tape():
        backward(sum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        with Tape():
            backward(sum(scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    zero_grad([x])
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ValueError):
            backward(mul(x, x))


def test_mean():
    x = Tensor(np.array([1.0, 2.0, 3.0, 6.0]), requires_grad=True)
    with Tape():
        out = mean(x)
        backward(out)
    assert out.item() == pytest.approx(3.0)
    np.testing.assert_allclose(x.grad, np.full(4, 0.25))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            out = mul(x, x)
        assert len(tape) == 0
        assert not out.requires_grad
        mul(x, x)
        assert len(tape) == 1


def test_ops_outside_a_tape_keep_no_history():
    x = Tensor(np.ones(2), requires_grad=True)
    out = mul(x, x)
    assert out.node is None
    assert not out.requires_grad
    with Tape() as tape:
        mul(x, x)
    assert len(tape) == 1


def test_non_finite_forward_raises():
    big = Tensor(np.array([1e30]), dtype=np.float32)
    with pytest.raises(NumericError):
        mul(big, big)


def test_precision_context():
    assert get_dtype() == np.float32
    with precision("double"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("half"):
            pass


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(rng.normal(size=(4, 3, 3, 3)))
    np.testing.assert_array_equal(conv2d(x, w).data, conv2d(x, w).data)


@pytest.mark.parametrize("report", op_gradient_checks(seed=4), ids=lambda r: r.name)
def test_op_gradients_match_finite_differences(report):
    assert report.passed, report.failures
    assert report.checked > 0

import math

import numpy as np
import pytest

from precoder.tensor import Function, Tensor, relu
from precoder.tensor import sum as tensor_sum
from precoder.verify import (
    GradientReport,
    check_gradients,
    checkpoint_checks,
    invariant_checks,
    metric_checks,
    parameter_count_checks,
    relative_error,
)


@pytest.mark.parametrize(
    "checks", [parameter_count_checks, metric_checks, invariant_checks, checkpoint_checks]
)
def test_self_checks_pass(checks):
    results = checks() if checks is parameter_count_checks else checks(seed=1)
    assert results
    for result in results:
        assert result.passed, f"{result.name}: {result.detail}"


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-7) == pytest.approx(1e-2)
    assert math.isclose(relative_error(1e-9, 0.0, floor=1e-5), 1e-4)


def test_gradient_report_result():
    report = GradientReport("conv2d", checked=4, max_error=2e-6)
    assert report.as_result().passed
    report.failures.append("input0[3] (1.00e-02)")
    result = report.as_result()
    assert not result.passed
    assert "input0[3]" in result.detail


class SquareWithSkewedGradient(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (grad * 2 * self.x * 1.005,)


def test_gradient_check_catches_a_skewed_backward():
    x = Tensor(np.linspace(0.5, 1.5, 6), requires_grad=True, dtype=np.float64)

    def loss():
        return tensor_sum(SquareWithSkewedGradient.apply(x))

    report = check_gradients("skewed square", loss, [("x", x)], tol=1e-3)
    assert not report.passed
    assert len(report.failures) == 6
    assert not report.kinks
    assert report.max_error == pytest.approx(0.005 / 1.005, rel=1e-3)


def test_gradient_check_skips_entries_on_a_kink():
    x = Tensor(np.array([0.0, 0.5, -0.5, 1.0]), requires_grad=True, dtype=np.float64)
    report = check_gradients("relu", lambda: tensor_sum(relu(x)), [("x", x)])
    assert report.kinks == ["x[0]"]
    assert report.checked == 3
    assert report.max_error < 1e-6
    # one kink in four entries is more than a report may skip
    assert not report.passed
    assert "1 on kinks skipped" in report.as_result().detail

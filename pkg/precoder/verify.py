"""Self-checks behind the `verify` command: finite-difference gradient checks, parameter
counts, metric oracles, network invariants and checkpoint round trips.

The tests import the same helpers, so a passing `precoder verify` and a passing test suite
exercise one code path.
"""
from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from precoder.constants import (
    GRADIENT_EPSILON,
    GRADIENT_FLOOR,
    NETWORK_TOLERANCE,
    OP_TOLERANCE,
    PIX_MAX,
    SSIM_K1,
    SSIM_K2,
)
from precoder.io import CHECKPOINT_MANIFEST, CheckpointError, load_checkpoint, save_checkpoint
from precoder.metrics import gaussian_window, mse, psnr, psnr_from_mse, ssim
from precoder.precnet import (
    NetworkConfig,
    NetworkWeights,
    build_variant,
    closed_form_parameter_count,
    count_parameters,
    init_state,
    iter_rollout,
    step,
)
from precoder.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    clamp_max,
    concat_channels,
    conv2d,
    hard_sigmoid,
    max_pool2,
    mul,
    narrow,
    no_grad,
    precision,
    relu,
    scale,
    sub,
    sum as tensor_sum,
    tanh,
    upsample2_nearest,
    zero_grad,
)
from precoder.training import sequence_loss

# (preset, variant) -> enumerated parameter total
PARAMETER_COUNT_ORACLES = {
    ("table1", "standard"): 7_598_763,
    ("small", "standard"): 848_123,
    ("table1", "single_lstm"): 6_950_043,
}

# one-sided slopes that disagree by more than this relative amount put the entry on a kink
KINK_JUMP = 0.1
# share of examined entries allowed to sit on kinks before a report fails
MAX_KINK_SHARE = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class GradientReport:
    name: str
    checked: int = 0
    max_error: float = 0.0
    failures: list[str] = field(default_factory=list)
    kinks: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        examined = self.checked + len(self.kinks)
        return not self.failures and len(self.kinks) <= MAX_KINK_SHARE * examined

    def as_result(self) -> CheckResult:
        detail = f"{self.checked} entries, max relative error {self.max_error:.2e}"
        if self.kinks:
            detail += f"; {len(self.kinks)} on kinks skipped"
        if self.failures:
            detail += f"; failed: {', '.join(self.failures[:5])}"
        return CheckResult(f"gradient {self.name}", self.passed, detail)


def relative_error(analytic: float, numeric: float, floor: float = GRADIENT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _entries(size: int, samples: int | None, rng: np.random.Generator) -> np.ndarray:
    if samples is None or samples >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=samples, replace=False))


def check_gradients(
    name: str,
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    tol: float = OP_TOLERANCE,
    eps: float = GRADIENT_EPSILON,
    floor: float = GRADIENT_FLOOR,
    samples: int | None = None,
    seed: int = 0,
) -> GradientReport:
    """Compare backpropagated gradients of `loss_fn()` with central differences.

    `samples` limits the number of entries checked per tensor. Tensors must be double
    precision. An entry whose one-sided differences disagree sits on a kink of relu, clamp
    or hard sigmoid; it is skipped and listed in `kinks` instead of being compared.
    """
    for tensor_name, tensor in tensors:
        if tensor.dtype != np.float64:
            raise ValueError(
                f"Gradient checks need double precision, {tensor_name} is {tensor.dtype}"
            )
        # perturbed in place below, so never share storage with the caller's arrays
        tensor.data = tensor.data.copy()
    zero_grad(t for _, t in tensors)
    with Tape():
        loss = loss_fn()
        backward(loss)

    def evaluate() -> float:
        with no_grad():
            return loss_fn().item()

    base = loss.item()
    rng = np.random.default_rng(seed)
    report = GradientReport(name)
    for tensor_name, tensor in tensors:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat, flat_grad = tensor.data.reshape(-1), analytic.reshape(-1)
        for index in _entries(tensor.size, samples, rng):
            original = flat[index]
            flat[index] = original + eps
            plus = evaluate()
            flat[index] = original - eps
            minus = evaluate()
            flat[index] = original
            a = float(flat_grad[index])
            error = relative_error(a, (plus - minus) / (2 * eps), floor)
            if error > tol:
                jump = relative_error((plus - base) / eps, (base - minus) / eps, floor)
                if jump > KINK_JUMP:
                    # the interval straddles a kink: no central difference to compare with
                    report.kinks.append(f"{tensor_name}[{index}]")
                    continue
                report.failures.append(f"{tensor_name}[{index}] ({error:.2e})")
            report.checked += 1
            report.max_error = max(report.max_error, error)
    zero_grad(t for _, t in tensors)
    return report


def _away_from(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    kinks: Sequence[float],
    low: float,
    high: float,
    margin: float = 0.05,
) -> np.ndarray:
    """Uniform values that keep `margin` away from every kink."""
    values = rng.uniform(low, high, size=shape)
    for kink in kinks:
        close = np.abs(values - kink) < margin
        values[close] += np.where(values[close] >= kink, margin, -margin)
    return values


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list[np.ndarray]]]:
    yield "conv2d", conv2d, [
        rng.normal(size=(2, 3, 5, 5)),
        rng.normal(size=(4, 3, 3, 3)),
        rng.normal(size=4),
    ]
    # distinct values a full grid step apart, so no pooling window holds a tie
    yield "max_pool2", max_pool2, [rng.permutation(32).reshape(1, 2, 4, 4) / 32.0]
    yield "upsample2_nearest", upsample2_nearest, [rng.normal(size=(1, 2, 3, 3))]
    yield "add", add, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]
    yield "sub", sub, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]
    yield "mul", mul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]
    yield "scale", lambda x: scale(x, -1.5), [rng.normal(size=(3, 4))]
    yield "concat_channels", lambda a, b: concat_channels([a, b]), [
        rng.normal(size=(1, 2, 3, 3)),
        rng.normal(size=(1, 3, 3, 3)),
    ]
    yield "narrow", lambda x: narrow(x, 1, 1, 3), [rng.normal(size=(1, 4, 3, 3))]
    yield "relu", relu, [_away_from(rng, (3, 4), (0.0,), -1, 1)]
    yield "tanh", tanh, [rng.normal(size=(3, 4))]
    yield "hard_sigmoid", hard_sigmoid, [_away_from(rng, (4, 5), (-2.5, 2.5), -4, 4)]
    yield "clamp_max", lambda x: clamp_max(x, 0.5), [_away_from(rng, (3, 4), (0.5,), -1, 2)]
    yield "sum", tensor_sum, [rng.normal(size=(2, 3))]


def op_gradient_checks(
    seed: int = 0, tol: float = OP_TOLERANCE, samples: int | None = None
) -> list[GradientReport]:
    """Check every differentiable op through a random linear projection of its output."""
    rng = np.random.default_rng(seed)
    reports = []
    with precision("double"):
        for name, op, arrays in _op_cases(rng):
            inputs = [Tensor(a, requires_grad=True) for a in arrays]
            with no_grad():
                shape = op(*inputs).shape
            projection = Tensor(rng.normal(size=shape))

            def loss(op=op, inputs=inputs, projection=projection) -> Tensor:
                return tensor_sum(mul(op(*inputs), projection))

            named = [(f"input{i}", t) for i, t in enumerate(inputs)]
            reports.append(check_gradients(name, loss, named, tol=tol, samples=samples))
    return reports


def tiny_network(seed: int = 0) -> tuple[NetworkWeights, np.ndarray]:
    """Seeded tiny network with every module weighted in the loss, and one 3-frame 8x8
    sequence kept away from the pixel bounds.
    """
    config = NetworkConfig.from_preset("tiny", lambdas=(1.0, 0.1, 0.1))
    weights = build_variant(config, seed=seed)
    frames = np.random.default_rng(seed).uniform(0.05, 0.95, size=(1, 3, 3, 8, 8))
    return weights, frames


def network_gradient_check(
    seed: int = 0, tol: float = NETWORK_TOLERANCE, samples: int | None = None
) -> GradientReport:
    with precision("double"):
        weights, frames = tiny_network(seed)
        return check_gradients(
            "network",
            lambda: sequence_loss(weights, frames),
            list(weights.parameters()),
            tol=tol,
            samples=samples,
            seed=seed,
        )


def parameter_count_checks() -> list[CheckResult]:
    results = []
    for (preset, variant), expected in PARAMETER_COUNT_ORACLES.items():
        config = NetworkConfig.from_preset(preset, variant=variant)
        counted = count_parameters(config)
        closed = closed_form_parameter_count(config)
        results.append(
            CheckResult(
                f"parameter count {preset}/{variant}",
                counted == closed == expected,
                f"enumerated {counted:,}, closed form {closed:,}, expected {expected:,}",
            )
        )
    config = NetworkConfig.from_preset("tiny")
    allocated = sum(t.size for t in build_variant(config).tensors())
    results.append(
        CheckResult(
            "parameter count tiny/allocated",
            allocated == count_parameters(config),
            f"allocated {allocated:,}, enumerated {count_parameters(config):,}",
        )
    )
    return results


def naive_mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    total = 0.0
    for index in np.ndindex(a.shape):
        total += (a[index] - b[index]) ** 2
    return total / a.size


def naive_ssim(a: np.ndarray, b: np.ndarray, pix_max: float = PIX_MAX) -> float:
    """Position-by-position SSIM from raw moments E[x^2] - E[x]^2."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    window = gaussian_window()
    size = window.shape[0]
    c1, c2 = (SSIM_K1 * pix_max) ** 2, (SSIM_K2 * pix_max) ** 2
    channel_means = []
    for x, y in zip(a, b):
        values = []
        for i in range(x.shape[0] - size + 1):
            for j in range(x.shape[1] - size + 1):
                px, py = x[i : i + size, j : j + size], y[i : i + size, j : j + size]
                mx, my = np.sum(window * px), np.sum(window * py)
                vx = np.sum(window * px * px) - mx * mx
                vy = np.sum(window * py * py) - my * my
                cxy = np.sum(window * px * py) - mx * my
                numerator = (2 * mx * my + c1) * (2 * cxy + c2)
                values.append(numerator / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        channel_means.append(np.mean(values))
    return float(np.mean(channel_means))


def metric_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(3, 32, 32)), rng.uniform(size=(3, 32, 32))
    c1 = (SSIM_K1 * PIX_MAX) ** 2
    constant = ssim(np.full((1, 16, 16), 0.5), np.full((1, 16, 16), 0.6))
    closed_form = (2 * 0.5 * 0.6 + c1) / (0.5**2 + 0.6**2 + c1)
    naive_psnr = 10 * math.log10(PIX_MAX**2 / naive_mse(a, b))
    checks = [
        ("ssim of identical frames", ssim(a, a) == 1.0, f"{ssim(a, a)!r}"),
        ("ssim symmetry", ssim(a, b) == ssim(b, a), f"{ssim(a, b)!r} vs {ssim(b, a)!r}"),
        ("ssim of constant frames", abs(constant - closed_form) < 1e-9, f"{constant!r}"),
        ("psnr at mse 0.01", abs(psnr_from_mse(0.01) - 20.0) < 1e-12, f"{psnr_from_mse(0.01)}"),
        ("mse against loops", abs(mse(a, b) - naive_mse(a, b)) < 1e-9, f"{mse(a, b)!r}"),
        ("psnr against loops", abs(psnr(a, b) - naive_psnr) < 1e-9, f"{psnr(a, b)!r}"),
        ("ssim against loops", abs(ssim(a, b) - naive_ssim(a, b)) < 1e-9, f"{ssim(a, b)!r}"),
    ]
    return [CheckResult(f"metric {name}", bool(ok), detail) for name, ok, detail in checks]


def invariant_checks(seed: int = 0) -> list[CheckResult]:
    """Error units stay nonnegative, predictions stay in range, closed-loop E_0 is zero."""
    with precision("double"):
        weights, _ = tiny_network(seed)
        frames = np.random.default_rng(seed).uniform(size=(2, 4, 3, 8, 8))
        pix_max = weights.config.pix_max
        nonnegative, in_range, closed_loop_zero = True, True, True
        with no_grad():
            state = init_state(weights.config, 2, 8, 8)
            for t in range(frames.shape[1]):
                prediction, state = step(weights, state, Tensor(frames[:, t]))
                nonnegative &= all((e.data >= 0).all() for e in state.errors)
                in_range &= bool(prediction.data.min() >= 0 and prediction.data.max() <= pix_max)
            seeds = [Tensor(frames[:, t]) for t in range(frames.shape[1])]
            state = init_state(weights.config, 2, 8, 8)
            for prediction, state in iter_rollout(weights, state, seeds, 3):
                closed_loop_zero &= not state.errors[0].data.any()
                nonnegative &= all((e.data >= 0).all() for e in state.errors)
    return [
        CheckResult("invariant error units nonnegative", nonnegative),
        CheckResult("invariant prediction within [0, pix_max]", in_range),
        CheckResult("invariant closed-loop bottom error is zero", closed_loop_zero),
    ]


def checkpoint_checks(seed: int = 0) -> list[CheckResult]:
    weights, _ = tiny_network(seed)
    with tempfile.TemporaryDirectory() as directory:
        save_checkpoint(directory, weights, epoch=3)
        loaded, _, manifest = load_checkpoint(directory)
        identical = all(
            np.array_equal(a.data, b.data)
            for a, b in zip(weights.tensors(), loaded.tensors())
        )
        with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w") as f:
            f.write("format: [unterminated\n")
        try:
            load_checkpoint(directory)
            rejected = False
        except CheckpointError:
            rejected = True
    return [
        CheckResult("checkpoint round trip", identical and manifest["epoch"] == 3),
        CheckResult("checkpoint corrupted manifest rejected", rejected),
    ]


def run_checks(samples: int | None = None, seed: int = 0) -> list[CheckResult]:
    """Run every self-check; `samples` limits the entries per tensor in gradient checks."""
    results = parameter_count_checks()
    results += metric_checks(seed)
    results += invariant_checks(seed)
    results += checkpoint_checks(seed)
    results += [r.as_result() for r in op_gradient_checks(seed, samples=samples)]
    results.append(network_gradient_check(seed, samples=samples).as_result())
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        detail = f" ({result.detail})" if result.detail else ""
        if result.passed:
            logging.info(f"{status} {result.name}{detail}")
        else:
            logging.error(f"{status} {result.name}{detail}")
    return results

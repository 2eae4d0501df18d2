"""Next-frame and closed-loop rollout evaluation over non-overlapping dataset windows.

Windows are processed in batches; independent batches run on a thread pool capped by
PRECODER_THREADS. Results are gathered in window order, so the worker count never changes
the reported numbers.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterator, Sequence

import numpy as np
from tqdm import tqdm

from precoder.constants import BATCH_SIZE, CONTEXT_FRAMES, ROLLOUT_HORIZON
from precoder.data import SequenceDataset, stack_windows
from precoder.metrics import MetricReport, copy_last_frame_baseline
from precoder.precnet import NetworkWeights, init_state, predict_sequence, rollout
from precoder.tensor import Tensor, no_grad
from precoder.util import thread_count

NEXT_FRAME_HEADER = (
    "window",
    "mse",
    "psnr",
    "ssim",
    "baseline_mse",
    "baseline_psnr",
    "baseline_ssim",
)
ROLLOUT_HEADER = ("horizon", "frames", "mse", "psnr", "ssim")


@dataclass
class NextFrameResult:
    model: MetricReport
    baseline: MetricReport

    def rows(self) -> Iterator[tuple]:
        for (index, *model), (_, *baseline) in zip(self.model.rows(), self.baseline.rows()):
            yield (index, *model, *baseline)

    def summary(self) -> dict[str, dict[str, float | int]]:
        return {"model": self.model.summary(), "baseline": self.baseline.summary()}


@dataclass
class RolloutResult:
    """Metrics per horizon step; `per_step[T - 1]` holds the reports of step T."""

    per_step: list[MetricReport]
    # (horizon, C, H, W) predictions of each window, kept on request
    predictions: list[np.ndarray] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.per_step)

    def rows(self) -> Iterator[tuple]:
        for horizon, report in enumerate(self.per_step, start=1):
            yield horizon, report.frame_count, report.mean_mse, report.mean_psnr, report.mean_ssim

    def summary(self) -> dict[int, dict[str, float | int]]:
        return {horizon: report.summary() for horizon, report in enumerate(self.per_step, 1)}


def _batches(windows: np.ndarray, batch_size: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"Batch size must be positive, got {batch_size}")
    return [windows[start : start + batch_size] for start in range(0, len(windows), batch_size)]


def map_batches(
    function: Callable[[np.ndarray], np.ndarray],
    batches: Sequence[np.ndarray],
    progress: bool = False,
    desc: str | None = None,
) -> list[np.ndarray]:
    """Apply `function` to every batch, in parallel when more than one thread is allowed."""
    threads = min(thread_count(), len(batches))
    if threads <= 1:
        return [function(batch) for batch in tqdm(batches, desc=desc, disable=not progress)]
    logging.debug(f"Evaluating {len(batches)} batches on {threads} threads")
    with ThreadPoolExecutor(max_workers=threads) as executor:
        results = executor.map(function, batches)
        return list(tqdm(results, total=len(batches), desc=desc, disable=not progress))


def _predict_last(weights: NetworkWeights, batch: np.ndarray) -> np.ndarray:
    # gradient recording is per thread, so every worker switches it off itself
    with no_grad():
        return predict_sequence(weights, batch)[-1].numpy()


def _rollout_batch(
    weights: NetworkWeights, context: int, horizon: int, batch: np.ndarray
) -> np.ndarray:
    size, _, _, height, width = batch.shape
    with no_grad():
        state = init_state(weights.config, size, height, width)
        seeds = [Tensor(batch[:, t]) for t in range(context)]
        predictions = rollout(weights, state, seeds, horizon)
    return np.stack([p.numpy() for p in predictions], axis=1)


def evaluate_next_frame(
    weights: NetworkWeights,
    dataset: SequenceDataset,
    context: int = CONTEXT_FRAMES,
    batch_size: int = BATCH_SIZE,
    progress: bool = False,
) -> NextFrameResult:
    """Feed `context` frames of every window and score the prediction of the next one,
    alongside the copy-last-frame baseline on the same target.
    """
    if context < 1:
        raise ValueError(f"Need at least one context frame, got {context}")
    length = context + 1
    windows = stack_windows(dataset, length, length)
    pix_max = weights.config.pix_max
    predictions = map_batches(
        partial(_predict_last, weights), _batches(windows, batch_size), progress, "Next frame"
    )
    model, baseline = MetricReport(), MetricReport()
    for window, prediction in zip(windows, np.concatenate(predictions)):
        model.add(prediction, window[-1], pix_max)
        baseline.extend(copy_last_frame_baseline(window, -1, pix_max))
    logging.info(
        f"Next-frame over {len(windows)} windows: MSE {model.mean_mse:.6g} "
        f"(copy last frame {baseline.mean_mse:.6g}), SSIM {model.mean_ssim:.4f} "
        f"(copy last frame {baseline.mean_ssim:.4f})"
    )
    return NextFrameResult(model, baseline)


def evaluate_rollout(
    weights: NetworkWeights,
    dataset: SequenceDataset,
    context: int = CONTEXT_FRAMES,
    horizon: int = ROLLOUT_HORIZON,
    batch_size: int = BATCH_SIZE,
    keep_predictions: bool = False,
    progress: bool = False,
) -> RolloutResult:
    """Seed with `context` frames, predict `horizon` frames closed-loop and score each step
    T against frame context + T of the window.
    """
    if context < 1:
        raise ValueError(f"Need at least one context frame, got {context}")
    if horizon < 1:
        raise ValueError(f"Rollout horizon must be at least 1, got {horizon}")
    length = context + horizon
    windows = stack_windows(dataset, length, length)
    pix_max = weights.config.pix_max
    batches = map_batches(
        partial(_rollout_batch, weights, context, horizon),
        _batches(windows, batch_size),
        progress,
        "Rollout",
    )
    result = RolloutResult([MetricReport() for _ in range(horizon)])
    for window, predicted in zip(windows, np.concatenate(batches)):
        for t, report in enumerate(result.per_step):
            report.add(predicted[t], window[context + t], pix_max)
        if keep_predictions:
            result.predictions.append(predicted)
    first, last = result.per_step[0], result.per_step[-1]
    logging.info(
        f"Rollout over {len(windows)} windows: MSE {first.mean_mse:.6g} at T=1, "
        f"{last.mean_mse:.6g} at T={horizon}"
    )
    return result

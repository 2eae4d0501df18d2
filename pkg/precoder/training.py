from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from tqdm import tqdm

from precoder.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BATCH_SIZE,
    FINAL_EPOCHS_FRACTION,
    FINAL_LEARNING_RATE,
    LEARNING_RATE,
    SEQUENCE_LENGTH,
    SEQUENCES_PER_EPOCH,
    VALIDATION_SEQUENCES,
)
from precoder.precnet import NetworkWeights, init_state, step
from precoder.tensor import Tape, Tensor, add, backward, no_grad, scale, sum, zero_grad
from precoder.util import check_keys


@dataclass
class LossConfig:
    """Time weights mu_t and module weights lambda_l of the sequence loss.

    The first prediction is made before any frame is seen and carries weight 0; the other
    l_s - 1 predictions share the weight equally.
    """

    sequence_length: int
    time_weights: tuple[float, ...]
    module_weights: tuple[float, ...]

    @classmethod
    def for_sequence(cls, sequence_length: int, module_weights: Sequence[float]) -> LossConfig:
        if sequence_length < 2:
            raise ValueError(f"Sequences need at least 2 frames, got {sequence_length}")
        later = 1.0 / (sequence_length - 1)
        return cls(
            sequence_length,
            (0.0,) + (later,) * (sequence_length - 1),
            tuple(module_weights),
        )


def sequence_loss(
    weights: NetworkWeights, frames: np.ndarray, module_weights: Sequence[float] | None = None
) -> Tensor:
    """sum_t mu_t sum_l (lambda_l / n_l) sum_i E_l^t(i) over a (batch, time, C, H, W) array,
    averaged over the batch (n_l counts the error units of one sequence).
    """
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ValueError(f"Expected (batch, time, C, H, W) frames, got shape {frames.shape}")
    batch, length, _, height, width = frames.shape
    if module_weights is None:
        module_weights = weights.config.lambdas
    loss_config = LossConfig.for_sequence(length, module_weights)
    state = init_state(weights.config, batch, height, width)
    loss = None
    for t in range(length):
        _, state = step(weights, state, Tensor(frames[:, t]))
        mu = loss_config.time_weights[t]
        for level, lam in enumerate(loss_config.module_weights):
            if mu == 0 or lam == 0:
                continue
            errors = state.errors[level]
            # errors.size counts the whole batch, so this is n_l per sequence times the batch
            # size: the loss is a batch mean and the learning rate does not scale with batch
            term = scale(sum(errors), mu * lam / errors.size)
            loss = term if loss is None else add(loss, term)
    if loss is None:
        return Tensor(np.zeros(()))
    return loss


@dataclass
class AdamState:
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_parameters(cls, params: Sequence[Tensor], **kwargs) -> AdamState:
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )

    def hyperparameters(self) -> dict[str, Any]:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}

    @classmethod
    def from_checkpoint(
        cls, names: Sequence[str], moments: dict[str, np.ndarray], settings: dict[str, Any]
    ) -> AdamState:
        try:
            m = [moments[f"adam.m.{name}"] for name in names]
            v = [moments[f"adam.v.{name}"] for name in names]
        except KeyError as e:
            raise ValueError(f"Checkpoint lacks optimizer moment {e}")
        return cls(
            beta1=float(settings["beta1"]),
            beta2=float(settings["beta2"]),
            eps=float(settings["eps"]),
            step=int(settings["step"]),
            m=m,
            v=v,
        )


def adam_step(
    adam: AdamState, params: Sequence[Tensor], lr: float, grads: Sequence[np.ndarray] | None = None
) -> None:
    """Bias-corrected Adam update; parameters without a gradient are treated as zero-gradient."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(adam.m) == len(adam.v)):
        raise ValueError(
            f"Got {len(params)} parameters, {len(grads)} gradients and {len(adam.m)} moments"
        )
    adam.step += 1
    correction1 = 1 - adam.beta1**adam.step
    correction2 = 1 - adam.beta2**adam.step
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.shape or adam.m[index].shape != param.shape:
            raise ValueError(
                f"Parameter {index} has shape {param.shape} but its gradient or moments "
                f"have shape {grad.shape} and {adam.m[index].shape}"
            )
        dtype = param.data.dtype.type
        m = dtype(adam.beta1) * adam.m[index] + dtype(1 - adam.beta1) * grad
        v = dtype(adam.beta2) * adam.v[index] + dtype(1 - adam.beta2) * grad * grad
        m_hat = m / dtype(correction1)
        v_hat = v / dtype(correction2)
        param.data = param.data - dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(adam.eps))
        adam.m[index], adam.v[index] = m, v


@dataclass
class LearningRateSchedule:
    """Piecewise-constant learning rate: each (first_epoch, lr) breakpoint holds until the
    next one.
    """

    breakpoints: list[tuple[int, float]]

    def __post_init__(self) -> None:
        self.breakpoints = sorted((int(e), float(lr)) for e, lr in self.breakpoints)
        if not self.breakpoints or self.breakpoints[0][0] != 0:
            raise ValueError(f"The schedule must start at epoch 0, got {self.breakpoints}")
        if any(lr <= 0 for _, lr in self.breakpoints):
            raise ValueError(f"Learning rates must be positive, got {self.breakpoints}")

    @classmethod
    def default(
        cls,
        epochs: int,
        lr: float = LEARNING_RATE,
        final_lr: float = FINAL_LEARNING_RATE,
        final_fraction: float = FINAL_EPOCHS_FRACTION,
    ) -> LearningRateSchedule:
        """`lr`, then `final_lr` for the last `final_fraction` of the epochs."""
        switch = epochs - math.floor(final_fraction * epochs)
        if switch <= 0 or switch >= epochs:
            return cls([(0, lr)])
        return cls([(0, lr), (switch, final_lr)])

    def lr(self, epoch: int) -> float:
        current = self.breakpoints[0][1]
        for first_epoch, lr in self.breakpoints:
            if epoch >= first_epoch:
                current = lr
        return current


# TrainConfig fields that must hold plain integers
INTEGER_FIELDS = (
    "sequence_length",
    "stride",
    "epochs",
    "batch_size",
    "sequences_per_epoch",
    "validation_sequences",
    "seed",
    "every",
)


@dataclass
class TrainConfig:
    dataset: str | None = None
    validation_dataset: str | None = None
    validation_fraction: float = 0.1
    network: dict[str, Any] = field(default_factory=lambda: {"preset": "toy"})
    sequence_length: int = SEQUENCE_LENGTH
    stride: int = 1
    epochs: int = 10
    batch_size: int = BATCH_SIZE
    sequences_per_epoch: int = SEQUENCES_PER_EPOCH
    validation_sequences: int = VALIDATION_SEQUENCES
    schedule: list[tuple[int, float]] | None = None
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON
    seed: int = 0
    precision: str = "single"
    every: int = 1

    def __post_init__(self) -> None:
        for name in INTEGER_FIELDS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"{name} must be an integer, got {value!r}")
        if self.sequence_length < 2:
            raise ValueError(f"sequence_length must be at least 2, got {self.sequence_length}")
        for name in ("batch_size", "sequences_per_epoch", "stride", "every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.validation_sequences < 0:
            raise ValueError("validation_sequences must be nonnegative")

    @classmethod
    def from_dict(cls, content: dict[str, Any]) -> TrainConfig:
        check_keys("training configuration", content, set(cls.__dataclass_fields__))
        try:
            return cls(**content)
        except TypeError as e:
            raise ValueError(f"Invalid training configuration: {e}")

    def to_dict(self) -> dict[str, Any]:
        content = dict(vars(self))
        content["schedule"] = [[e, lr] for e, lr in self.lr_schedule().breakpoints]
        return content

    def lr_schedule(self) -> LearningRateSchedule:
        if self.schedule is None:
            return LearningRateSchedule.default(self.epochs)
        return LearningRateSchedule(self.schedule)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None = None
    lr: float = 0.0


@dataclass
class TrainResult:
    weights: NetworkWeights
    adam: AdamState
    history: list[EpochRecord]
    next_epoch: int


def epoch_indices(seed: int, epoch: int, count: int, population: int) -> np.ndarray:
    """Sequences of one epoch, drawn with replacement by a generator seeded per epoch."""
    return np.random.default_rng([seed, epoch]).integers(0, population, size=count)


def batch_loss(weights: NetworkWeights, batch: np.ndarray) -> float:
    with no_grad():
        return sequence_loss(weights, batch).item()


def train(
    weights: NetworkWeights,
    windows: np.ndarray,
    config: TrainConfig,
    validation: np.ndarray | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    stop_epoch: int | None = None,
    progress: bool = False,
) -> TrainResult:
    """Optimize the summed sequence losses of randomly drawn (time, C, H, W) windows.

    Every epoch draws `sequences_per_epoch` windows, forms batches of `batch_size` and takes
    one Adam step per batch; `validation_sequences` windows are scored afterwards.
    """
    if len(windows) == 0:
        raise ValueError("Cannot train on an empty dataset")
    params = weights.tensors()
    if adam is None:
        adam = AdamState.for_parameters(
            params, beta1=config.beta1, beta2=config.beta2, eps=config.eps
        )
    schedule = config.lr_schedule()
    stop_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    history = []
    for epoch in range(start_epoch, stop_epoch):
        lr = schedule.lr(epoch)
        indices = epoch_indices(config.seed, epoch, config.sequences_per_epoch, len(windows))
        batches = range(0, len(indices), config.batch_size)
        losses = []
        for start in tqdm(batches, desc=f"Epoch {epoch}", disable=not progress, leave=False):
            batch = windows[indices[start : start + config.batch_size]]
            zero_grad(params)
            with Tape():
                loss = sequence_loss(weights, batch)
                backward(loss)
            adam_step(adam, params, lr)
            losses.append(loss.item())
            logging.debug(f"Epoch {epoch} step {adam.step}: loss {losses[-1]:.6g}")
        record = EpochRecord(epoch, float(np.mean(losses)), lr=lr)
        if validation is not None and len(validation) and config.validation_sequences:
            picks = epoch_indices(
                config.seed + 1, epoch, config.validation_sequences, len(validation)
            )
            record.val_loss = float(
                np.mean(
                    [
                        batch_loss(weights, validation[picks[s : s + config.batch_size]])
                        for s in range(0, len(picks), config.batch_size)
                    ]
                )
            )
        history.append(record)
        val = "" if record.val_loss is None else f", validation loss {record.val_loss:.6g}"
        logging.info(f"Epoch {epoch}: lr {lr:g}, train loss {record.train_loss:.6g}{val}")
    zero_grad(params)
    return TrainResult(weights, adam, history, max(start_epoch, stop_epoch))

"""The predictive-coding hierarchy: N+1 modules updated top-down (prediction phase) and then
bottom-up (correction phase) at every time step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from precoder.constants import PIX_MAX
from precoder.layers import (
    ConvLSTMState,
    ConvLSTMWeights,
    DecoderWeights,
    convlstm_step,
    decoder,
    error_units,
)
from precoder.tensor import (
    NumericError,
    Tensor,
    concat_channels,
    max_pool2,
    upsample2_nearest,
)
from precoder.util import check_keys

# representation channels per module
PRESETS = {
    "table1": (60, 120, 240),
    "small": (20, 40, 80),
    "toy": (8, 16, 32),
    "tiny": (2, 4, 8),
}

# accepted keys of the `network` section of a configuration file
PRESET_KEYS = {"preset", "image_channels", "kernel", "lambdas", "variant", "pix_max"}
CHANNEL_KEYS = PRESET_KEYS - {"preset"} | {"r_channels"}
EXPLICIT_KEYS = {
    "r_channels",
    "a_channels",
    "lstm_kernel",
    "conv_kernel",
    "lambdas",
    "pix_max",
    "variant",
}


class Variant(str, Enum):
    STANDARD = "standard"
    # one LSTM per module, fed with the channel-concatenation of both phase inputs
    SINGLE_LSTM = "single_lstm"


@dataclass
class NetworkConfig:
    """Per-module channels, kernels and loss weights.

    Module l predicts the image (l = 0) or the pooled representation of module l-1, so
    a_channels[l] == r_channels[l-1] for l >= 1.
    """

    r_channels: tuple[int, ...]
    a_channels: tuple[int, ...]
    lstm_kernel: tuple[int, ...]
    conv_kernel: tuple[int, ...]
    lambdas: tuple[float, ...]
    pix_max: float = PIX_MAX
    variant: Variant = Variant.STANDARD

    def __post_init__(self) -> None:
        self.r_channels = tuple(int(c) for c in self.r_channels)
        self.a_channels = tuple(int(c) for c in self.a_channels)
        self.lstm_kernel = tuple(int(k) for k in self.lstm_kernel)
        self.conv_kernel = tuple(int(k) for k in self.conv_kernel)
        self.lambdas = tuple(float(w) for w in self.lambdas)
        self.variant = Variant(self.variant)
        n = len(self.r_channels)
        if n < 2:
            raise ValueError(f"The hierarchy needs at least 2 modules (N > 0), got {n}")
        for name in ("a_channels", "lstm_kernel", "conv_kernel", "lambdas"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries, got {getattr(self, name)}")
        if any(c < 1 for c in self.r_channels + self.a_channels):
            raise ValueError(f"Channel counts must be positive, got {self.r_channels}")
        if any(k < 1 or k % 2 == 0 for k in self.lstm_kernel + self.conv_kernel):
            raise ValueError("Kernel sizes must be positive and odd")
        for level in range(1, n):
            if self.a_channels[level] != self.r_channels[level - 1]:
                raise ValueError(
                    f"Module {level} predicts the pooled representation of module {level - 1}, "
                    f"so a_channels[{level}] must be {self.r_channels[level - 1]}"
                )
        if any(w < 0 for w in self.lambdas):
            raise ValueError(f"Module weights must be nonnegative, got {self.lambdas}")
        if self.pix_max <= 0:
            raise ValueError(f"pix_max must be positive, got {self.pix_max}")

    @classmethod
    def from_channels(
        cls,
        r_channels: Sequence[int],
        image_channels: int = 3,
        kernel: int = 3,
        lambdas: Sequence[float] | None = None,
        variant: Variant | str = Variant.STANDARD,
        pix_max: float = PIX_MAX,
    ) -> NetworkConfig:
        n = len(r_channels)
        if lambdas is None:
            lambdas = (1.0,) + (0.0,) * (n - 1)
        return cls(
            r_channels=tuple(r_channels),
            a_channels=(image_channels,) + tuple(r_channels[:-1]),
            lstm_kernel=(kernel,) * n,
            conv_kernel=(kernel,) * n,
            lambdas=tuple(lambdas),
            pix_max=pix_max,
            variant=variant,
        )

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> NetworkConfig:
        if name not in PRESETS:
            raise ValueError(f"Unknown preset {name!r}, choose from {sorted(PRESETS)}")
        return cls.from_channels(PRESETS[name], **kwargs)

    @classmethod
    def from_dict(cls, content: dict[str, Any]) -> NetworkConfig:
        """Build from a configuration mapping: either `preset: NAME` or explicit lists."""
        content = dict(content)
        try:
            if "preset" in content:
                check_keys("network", content, PRESET_KEYS)
                return cls.from_preset(content.pop("preset"), **content)
            if "a_channels" not in content:
                check_keys("network", content, CHANNEL_KEYS)
                return cls.from_channels(**content)
            check_keys("network", content, EXPLICIT_KEYS)
            return cls(**content)
        except TypeError as e:
            raise ValueError(f"Incomplete network configuration: {e}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_channels": list(self.r_channels),
            "a_channels": list(self.a_channels),
            "lstm_kernel": list(self.lstm_kernel),
            "conv_kernel": list(self.conv_kernel),
            "lambdas": list(self.lambdas),
            "pix_max": self.pix_max,
            "variant": self.variant.value,
        }

    @property
    def module_count(self) -> int:
        return len(self.r_channels)

    @property
    def top(self) -> int:
        return self.module_count - 1

    @property
    def image_channels(self) -> int:
        return self.a_channels[0]

    def error_channels(self, level: int) -> int:
        return 2 * self.a_channels[level]

    def up_input_channels(self, level: int) -> int:
        """Channels of E_l, the bottom-up input of module l < N."""
        return self.error_channels(level)

    def down_input_channels(self, level: int) -> int:
        """Channels of E_N (top) or of the upsampled E_{l+1}, the top-down input."""
        return self.error_channels(min(level + 1, self.top))

    def check_frame_size(self, height: int, width: int) -> None:
        divisor = 2**self.top
        if height % divisor or width % divisor:
            raise ValueError(
                f"Frame size {height}x{width} must be divisible by {divisor} for "
                f"{self.module_count} modules"
            )


@dataclass
class ModuleWeights:
    """Parameters of one module. The standard variant has a down LSTM and (below the top) an
    up LSTM sharing one state; the single-LSTM variant keeps one LSTM in `lstm`.
    """

    decoder: DecoderWeights
    down: ConvLSTMWeights | None = None
    up: ConvLSTMWeights | None = None
    lstm: ConvLSTMWeights | None = None

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for part in ("down", "up", "lstm"):
            weights = getattr(self, part)
            if weights is not None:
                for name, tensor in weights.parameters():
                    yield f"{part}.{name}", tensor
        for name, tensor in self.decoder.parameters():
            yield f"decoder.{name}", tensor


@dataclass
class NetworkWeights:
    config: NetworkConfig
    modules: list[ModuleWeights] = field(default_factory=list)

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        """(name, tensor) pairs in a fixed order shared with `parameter_shapes`."""
        for level, module in enumerate(self.modules):
            for name, tensor in module.parameters():
                yield f"module{level}.{name}", tensor

    def tensors(self) -> list[Tensor]:
        return [tensor for _, tensor in self.parameters()]


@dataclass
class NetworkState:
    """R_l, C_l and E_l of every module after a time step."""

    lstm: list[ConvLSTMState]
    errors: list[Tensor]

    @property
    def hidden(self) -> list[Tensor]:
        return [s.hidden for s in self.lstm]

    @property
    def cell(self) -> list[Tensor]:
        return [s.cell for s in self.lstm]


def _lstm_layout(config: NetworkConfig, level: int) -> Iterator[tuple[str, int]]:
    """(part, input channels) of every LSTM in a module."""
    if config.variant is Variant.SINGLE_LSTM:
        if level == config.top:
            yield "lstm", config.down_input_channels(level)
        else:
            yield "lstm", config.up_input_channels(level) + config.down_input_channels(level)
        return
    yield "down", config.down_input_channels(level)
    if level < config.top:
        yield "up", config.up_input_channels(level)


def parameter_shapes(config: NetworkConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Enumerate every parameter tensor by name and shape, in `NetworkWeights` order."""
    for level in range(config.module_count):
        hidden, kernel = config.r_channels[level], config.lstm_kernel[level]
        for part, in_channels in _lstm_layout(config, level):
            for name, shape in ConvLSTMWeights.shapes(in_channels, hidden, kernel):
                yield f"module{level}.{part}.{name}", shape
        shapes = DecoderWeights.shapes(hidden, config.a_channels[level], config.conv_kernel[level])
        for name, shape in shapes:
            yield f"module{level}.decoder.{name}", shape


def count_parameters(config: NetworkConfig) -> int:
    return sum(math.prod(shape) for _, shape in parameter_shapes(config))


def closed_form_parameter_count(config: NetworkConfig) -> int:
    total = 0
    for level in range(config.module_count):
        hidden = config.r_channels[level]
        for _, in_channels in _lstm_layout(config, level):
            total += ConvLSTMWeights.count(in_channels, hidden, config.lstm_kernel[level])
        total += DecoderWeights.count(hidden, config.a_channels[level], config.conv_kernel[level])
    return total


def build_variant(config: NetworkConfig, seed: int | None = 0) -> NetworkWeights:
    """Allocate the weights of `config`'s variant, seeded-uniform or all zeros (seed=None)."""
    rng = None if seed is None else np.random.default_rng(seed)
    modules = []
    for level in range(config.module_count):
        hidden, kernel = config.r_channels[level], config.lstm_kernel[level]
        lstms = {}
        for part, in_channels in _lstm_layout(config, level):
            if rng is None:
                lstms[part] = ConvLSTMWeights.zeros(in_channels, hidden, kernel)
            else:
                lstms[part] = ConvLSTMWeights.initialize(in_channels, hidden, kernel, rng)
        out_channels, conv_kernel = config.a_channels[level], config.conv_kernel[level]
        if rng is None:
            dec = DecoderWeights.zeros(hidden, out_channels, conv_kernel)
        else:
            dec = DecoderWeights.initialize(hidden, out_channels, conv_kernel, rng)
        modules.append(ModuleWeights(decoder=dec, **lstms))
    weights = NetworkWeights(config, modules)
    logging.debug(
        f"Built {config.variant.value} network with {count_parameters(config)} parameters"
    )
    return weights


def init_state(config: NetworkConfig, batch: int, height: int, width: int) -> NetworkState:
    """All-zero states for t = 0."""
    config.check_frame_size(height, width)
    lstm, errors = [], []
    for level in range(config.module_count):
        h, w = height // 2**level, width // 2**level
        lstm.append(ConvLSTMState.zeros(batch, config.r_channels[level], h, w))
        errors.append(Tensor.zeros((batch, config.error_channels(level), h, w)))
    return NetworkState(lstm, errors)


def _check_state(config: NetworkConfig, state: NetworkState) -> None:
    if len(state.lstm) != config.module_count or len(state.errors) != config.module_count:
        raise ValueError(
            f"State has {len(state.lstm)} modules but the network has {config.module_count}"
        )
    batch, _, height, width = state.lstm[0].shape
    for level in range(config.module_count):
        h, w = height // 2**level, width // 2**level
        expected_r = (batch, config.r_channels[level], h, w)
        expected_e = (batch, config.error_channels(level), h, w)
        if state.lstm[level].shape != expected_r or state.errors[level].shape != expected_e:
            raise ValueError(
                f"State of module {level} has shapes {state.lstm[level].shape} and "
                f"{state.errors[level].shape}, expected {expected_r} and {expected_e}"
            )
        for tensor in (state.lstm[level].hidden, state.lstm[level].cell, state.errors[level]):
            if not np.isfinite(tensor.data).all():
                raise NumericError(f"State of module {level} contains non-finite values")


def _down_update(
    weights: NetworkWeights, level: int, state: ConvLSTMState, down_input: Tensor
) -> ConvLSTMState:
    module = weights.modules[level]
    if module.lstm is None:
        return convlstm_step(module.down, state, down_input)
    if level == weights.config.top:
        return convlstm_step(module.lstm, state, down_input)
    batch, _, h, w = down_input.shape
    absent = Tensor.zeros((batch, weights.config.up_input_channels(level), h, w))
    return convlstm_step(module.lstm, state, concat_channels([absent, down_input]))


def _up_update(
    weights: NetworkWeights, level: int, state: ConvLSTMState, up_input: Tensor
) -> ConvLSTMState:
    module = weights.modules[level]
    if module.lstm is None:
        return convlstm_step(module.up, state, up_input)
    batch, _, h, w = up_input.shape
    absent = Tensor.zeros((batch, weights.config.down_input_channels(level), h, w))
    return convlstm_step(module.lstm, state, concat_channels([up_input, absent]))


def step(
    weights: NetworkWeights, state: NetworkState, image: Tensor | None
) -> tuple[Tensor, NetworkState]:
    """Advance the hierarchy by one time step and return the bottom prediction of `image`.

    The prediction is made before `image` is seen. With `image=None` the prediction itself
    is used as the input (closed loop), so the bottom error is exactly zero.
    """
    config = weights.config
    _check_state(config, state)
    if image is not None:
        expected = (state.lstm[0].shape[0], config.image_channels) + state.lstm[0].shape[2:]
        if image.shape != expected:
            raise ValueError(f"Image has shape {image.shape}, expected {expected}")
        if image.data.min() < 0 or image.data.max() > config.pix_max:
            raise ValueError(f"Pixel values must lie in [0, {config.pix_max}]")

    top = config.top
    lstm = list(state.lstm)
    errors = list(state.errors)
    predictions: list[Tensor | None] = [None] * config.module_count

    # prediction phase, top-down; targets use the lower representations of time t-1
    for level in range(top, -1, -1):
        if level == top:
            down_input = state.errors[top]
        else:
            down_input = upsample2_nearest(errors[level + 1])
        lstm[level] = _down_update(weights, level, state.lstm[level], down_input)
        if level == 0:
            prediction = decoder(weights.modules[0].decoder, lstm[0].hidden, config.pix_max)
            target = prediction if image is None else image
        else:
            prediction = decoder(weights.modules[level].decoder, lstm[level].hidden)
            target = max_pool2(state.lstm[level - 1].hidden)
        predictions[level] = prediction
        errors[level] = error_units(prediction, target)

    # correction phase, bottom-up; targets use the lower representations of time t
    for level in range(top + 1):
        if level > 0:
            errors[level] = error_units(predictions[level], max_pool2(lstm[level - 1].hidden))
        if level < top:
            lstm[level] = _up_update(weights, level, lstm[level], errors[level])

    return predictions[0], NetworkState(lstm, errors)


def iter_rollout(
    weights: NetworkWeights, state: NetworkState, seed_frames: Sequence[Tensor], horizon: int
) -> Iterator[tuple[Tensor, NetworkState]]:
    """Consume `seed_frames`, then yield (prediction, state) for `horizon` closed-loop steps."""
    if not seed_frames:
        raise ValueError("A rollout needs at least one seed frame")
    if horizon < 1:
        raise ValueError(f"Rollout horizon must be at least 1, got {horizon}")
    for frame in seed_frames:
        _, state = step(weights, state, frame)
    for _ in range(horizon):
        prediction, state = step(weights, state, None)
        yield prediction, state


def rollout(
    weights: NetworkWeights, state: NetworkState, seed_frames: Sequence[Tensor], horizon: int
) -> list[Tensor]:
    return [prediction for prediction, _ in iter_rollout(weights, state, seed_frames, horizon)]


def predict_sequence(weights: NetworkWeights, frames: np.ndarray) -> list[Tensor]:
    """Run `step` over a (batch, time, C, H, W) array; the t-th output predicts frame t."""
    batch, _, _, height, width = frames.shape
    state = init_state(weights.config, batch, height, width)
    predictions = []
    for frame in _frames_as_tensors(frames):
        prediction, state = step(weights, state, frame)
        predictions.append(prediction)
    return predictions


def _frames_as_tensors(frames: np.ndarray) -> Iterable[Tensor]:
    for t in range(frames.shape[1]):
        yield Tensor(frames[:, t])

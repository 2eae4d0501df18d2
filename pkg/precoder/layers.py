from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from precoder.constants import DECODER_BIAS
from precoder.tensor import (
    Tensor,
    add,
    clamp_max,
    concat,
    concat_channels,
    conv2d,
    hard_sigmoid,
    mul,
    narrow,
    relu,
    sub,
    tanh,
)

# input, forget, output gates and the cell candidate
GATES = ("i", "f", "o", "c")


@dataclass
class ConvLSTMState:
    """Hidden state R and cell state C of a convolutional LSTM, owned by the caller so that
    several weight sets can update the same state.
    """

    hidden: Tensor
    cell: Tensor

    def __post_init__(self) -> None:
        if self.hidden.shape != self.cell.shape:
            raise ValueError(
                f"Hidden and cell state shapes differ: {self.hidden.shape} vs {self.cell.shape}"
            )

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int) -> ConvLSTMState:
        shape = (batch, channels, height, width)
        return cls(Tensor.zeros(shape), Tensor.zeros(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.hidden.shape


@dataclass
class ConvLSTMWeights:
    """Peephole-free convolutional LSTM parameters: per gate an input kernel W_x, a hidden
    kernel W_h and a single bias b.
    """

    input_kernels: dict[str, Tensor]
    hidden_kernels: dict[str, Tensor]
    biases: dict[str, Tensor]

    def __post_init__(self) -> None:
        shapes = {g: self.input_kernels[g].shape for g in GATES}
        if len(set(shapes.values())) > 1:
            raise ValueError(f"Input kernels of all gates must share a shape, got {shapes}")
        for gate in GATES:
            expected = (self.hidden_channels, self.hidden_channels, self.kernel_size)
            if self.hidden_kernels[gate].shape[:3] != expected:
                raise ValueError(
                    f"Hidden kernel of gate {gate} has shape {self.hidden_kernels[gate].shape}"
                )
            if self.biases[gate].shape != (self.hidden_channels,):
                raise ValueError(f"Bias of gate {gate} has shape {self.biases[gate].shape}")

    @property
    def hidden_channels(self) -> int:
        return self.input_kernels["i"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.input_kernels["i"].shape[1]

    @property
    def kernel_size(self) -> int:
        return self.input_kernels["i"].shape[2]

    @staticmethod
    def shapes(in_channels: int, hidden_channels: int, kernel: int) -> Iterator[tuple]:
        for gate in GATES:
            yield f"W_x{gate}", (hidden_channels, in_channels, kernel, kernel)
            yield f"W_h{gate}", (hidden_channels, hidden_channels, kernel, kernel)
            yield f"b_{gate}", (hidden_channels,)

    @staticmethod
    def count(in_channels: int, hidden_channels: int, kernel: int) -> int:
        per_gate = kernel**2 * (in_channels + hidden_channels) * hidden_channels
        return 4 * (per_gate + hidden_channels)

    @classmethod
    def zeros(cls, in_channels: int, hidden_channels: int, kernel: int) -> ConvLSTMWeights:
        shapes = cls.shapes(in_channels, hidden_channels, kernel)
        arrays = {name: np.zeros(shape) for name, shape in shapes}
        return cls._from_arrays(arrays)

    @classmethod
    def initialize(
        cls, in_channels: int, hidden_channels: int, kernel: int, rng: np.random.Generator
    ) -> ConvLSTMWeights:
        """Uniform in [-s, s] with s = 1/sqrt(fan_in); the forget-gate bias starts at zero."""
        arrays = {}
        for name, shape in cls.shapes(in_channels, hidden_channels, kernel):
            if name == "b_f":
                arrays[name] = np.zeros(shape)
                continue
            if len(shape) == 4:
                fan_in = math.prod(shape[1:])
            else:
                fan_in = (in_channels + hidden_channels) * kernel**2
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls._from_arrays(arrays)

    @classmethod
    def _from_arrays(cls, arrays: dict[str, np.ndarray]) -> ConvLSTMWeights:
        def param(name):
            return Tensor(arrays[name], requires_grad=True)

        return cls(
            input_kernels={g: param(f"W_x{g}") for g in GATES},
            hidden_kernels={g: param(f"W_h{g}") for g in GATES},
            biases={g: param(f"b_{g}") for g in GATES},
        )

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for gate in GATES:
            yield f"W_x{gate}", self.input_kernels[gate]
            yield f"W_h{gate}", self.hidden_kernels[gate]
            yield f"b_{gate}", self.biases[gate]


def convlstm_step(
    weights: ConvLSTMWeights, state: ConvLSTMState, input: Tensor
) -> ConvLSTMState:
    """One convolutional LSTM update with hard-sigmoid gates:

    C' = f * C + i * tanh(W_xc * x + W_hc * R + b_c),  R' = o * tanh(C')
    """
    if input.shape[2:] != state.shape[2:]:
        raise ValueError(
            f"LSTM input spatial size {input.shape[2:]} differs from state {state.shape[2:]}"
        )
    if input.shape[1] != weights.in_channels:
        raise ValueError(
            f"LSTM input has {input.shape[1]} channels but W_x expects {weights.in_channels}"
        )
    # all four gates in one pair of convolutions, sliced apart afterwards
    input_kernel = concat([weights.input_kernels[g] for g in GATES], axis=0)
    hidden_kernel = concat([weights.hidden_kernels[g] for g in GATES], axis=0)
    bias = concat([weights.biases[g] for g in GATES], axis=0)
    stacked = add(conv2d(input, input_kernel, bias), conv2d(state.hidden, hidden_kernel))

    n = weights.hidden_channels
    i, f, o, c = (narrow(stacked, 1, k * n, (k + 1) * n) for k in range(4))
    cell = add(mul(hard_sigmoid(f), state.cell), mul(hard_sigmoid(i), tanh(c)))
    hidden = mul(hard_sigmoid(o), tanh(cell))
    return ConvLSTMState(hidden, cell)


def error_units(prediction: Tensor, target: Tensor) -> Tensor:
    """ReLU of the merged positive and negative prediction errors; channels are doubled."""
    if prediction.shape != target.shape:
        raise ValueError(
            f"Prediction shape {prediction.shape} differs from target shape {target.shape}"
        )
    return relu(concat_channels([sub(prediction, target), sub(target, prediction)]))


@dataclass
class DecoderWeights:
    kernel: Tensor
    bias: Tensor

    @staticmethod
    def shapes(in_channels: int, out_channels: int, kernel: int) -> Iterator[tuple]:
        yield "kernel", (out_channels, in_channels, kernel, kernel)
        yield "bias", (out_channels,)

    @staticmethod
    def count(in_channels: int, out_channels: int, kernel: int) -> int:
        return kernel**2 * in_channels * out_channels + out_channels

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, kernel: int) -> DecoderWeights:
        shape = (out_channels, in_channels, kernel, kernel)
        return cls(
            Tensor(np.zeros(shape), requires_grad=True),
            Tensor(np.zeros(out_channels), requires_grad=True),
        )

    @classmethod
    def initialize(
        cls, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator
    ) -> DecoderWeights:
        bound = 1.0 / math.sqrt(in_channels * kernel**2)
        shape = (out_channels, in_channels, kernel, kernel)
        return cls(
            Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True),
            Tensor(np.full(out_channels, DECODER_BIAS), requires_grad=True),
        )

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "kernel", self.kernel
        yield "bias", self.bias


def decoder(weights: DecoderWeights, hidden: Tensor, pix_max: float | None = None) -> Tensor:
    """relu(conv(R)); the bottom module also clamps at pix_max."""
    if hidden.shape[1] != weights.kernel.shape[1]:
        raise ValueError(
            f"Decoder input has {hidden.shape[1]} channels but expects {weights.kernel.shape[1]}"
        )
    prediction = relu(conv2d(hidden, weights.kernel, weights.bias))
    if pix_max is not None:
        prediction = clamp_max(prediction, pix_max)
    return prediction

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from precoder.util import check_keys

SHAPE_KINDS = ("rectangle", "disc")


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Scale 8-bit pixel values to [0, 1]."""
    return pixels.astype(np.float32) / np.float32(255)


def to_bytes(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


@dataclass
class SequenceDataset:
    """Recordings of frames, each an array of shape (time, channels, height, width) with
    values in [0, 1].
    """

    recordings: list[np.ndarray]
    names: list[str] = field(default_factory=list)
    fps: float | None = None

    def __post_init__(self) -> None:
        if not self.names:
            self.names = [f"recording_{i:04d}" for i in range(len(self.recordings))]
        if len(self.names) != len(self.recordings):
            raise ValueError(f"Got {len(self.names)} names for {len(self.recordings)} recordings")
        shapes = {r.shape[1:] for r in self.recordings}
        if len(shapes) > 1:
            raise ValueError(f"All frames must share dims, got {sorted(shapes)}")
        for name, recording in zip(self.names, self.recordings):
            if recording.ndim != 4:
                raise ValueError(f"Recording {name} must be (time, C, H, W), got {recording.shape}")
            if recording.size and (recording.min() < 0 or recording.max() > 1):
                raise ValueError(f"Pixel values of recording {name} fall outside [0, 1]")

    def __len__(self) -> int:
        return len(self.recordings)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        if not self.recordings:
            raise ValueError("An empty dataset has no frame shape")
        return self.recordings[0].shape[1:]

    @property
    def lengths(self) -> list[int]:
        return [len(r) for r in self.recordings]

    def check_divisible(self, divisor: int) -> None:
        _, height, width = self.frame_shape
        if height % divisor or width % divisor:
            raise ValueError(f"Frame size {height}x{width} is not divisible by {divisor}")


@dataclass
class SyntheticSpec:
    """Bouncing shapes on a black canvas. Velocities are whole pixels per frame, drawn
    uniformly from the inclusive ranges.
    """

    canvas: int = 32
    shape_count: int = 2
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    size_range: tuple[int, int] = (6, 12)
    velocity_x: tuple[int, int] = (-2, 2)
    velocity_y: tuple[int, int] = (-2, 2)
    channels: int = 3
    divisor: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        self.shape_kinds = tuple(self.shape_kinds)
        self.size_range = tuple(self.size_range)
        self.velocity_x = tuple(self.velocity_x)
        self.velocity_y = tuple(self.velocity_y)
        if not 1 <= self.channels <= 3:
            raise ValueError(f"Frames have 1 to 3 channels, got {self.channels}")
        if self.canvas < 1 or self.canvas % self.divisor:
            raise ValueError(f"Canvas size {self.canvas} must be divisible by {self.divisor}")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValueError(f"Shape kinds must come from {SHAPE_KINDS}, got {self.shape_kinds}")
        low, high = self.size_range
        if low < 1 or high < low:
            raise ValueError(f"Invalid shape size range {self.size_range}")
        if high > self.canvas:
            raise ValueError(f"Shapes up to {high} pixels do not fit a {self.canvas} canvas")
        for name in ("velocity_x", "velocity_y"):
            low, high = getattr(self, name)
            if high < low:
                raise ValueError(f"Invalid {name} range {getattr(self, name)}")

    @classmethod
    def from_dict(cls, content: dict[str, Any]) -> SyntheticSpec:
        check_keys("synthetic", content, set(cls.__dataclass_fields__))
        try:
            return cls(**content)
        except TypeError as e:
            raise ValueError(f"Invalid synthetic dataset configuration: {e}")

    def to_dict(self) -> dict[str, Any]:
        return {
            name: list(value) if isinstance(value, tuple) else value
            for name, value in vars(self).items()
        }


@dataclass
class MovingShape:
    kind: str
    size: int
    color: tuple[int, int, int]
    x: int
    y: int
    vx: int
    vy: int

    def advance(self, canvas: int) -> None:
        """Move one frame, reflecting off the borders so the shape stays in the canvas."""
        self.x, self.vx = _reflect(self.x + self.vx, self.vx, canvas - self.size)
        self.y, self.vy = _reflect(self.y + self.vy, self.vy, canvas - self.size)

    def draw(self, frame: np.ndarray) -> None:
        """Paint onto an 8-bit (channels, height, width) frame."""
        color = np.asarray(self.color, dtype=np.uint8)[: frame.shape[0], None, None]
        window = frame[:, self.y : self.y + self.size, self.x : self.x + self.size]
        if self.kind == "rectangle":
            window[...] = color
            return
        radius = self.size / 2
        yy, xx = np.mgrid[: self.size, : self.size] + 0.5
        mask = (yy - radius) ** 2 + (xx - radius) ** 2 <= radius**2
        window[:, mask] = color[:, :, 0]


def _reflect(position: int, velocity: int, limit: int) -> tuple[int, int]:
    while position < 0 or position > limit:
        if limit == 0:
            return 0, velocity
        if position < 0:
            position, velocity = -position, -velocity
        else:
            position, velocity = 2 * limit - position, -velocity
    return position, velocity


def render_frames(
    shapes: Sequence[MovingShape], canvas: int, length: int, channels: int = 3
) -> np.ndarray:
    """Render `length` 8-bit frames; the first frame shows the shapes at their start."""
    frames = np.zeros((length, channels, canvas, canvas), dtype=np.uint8)
    for t in range(length):
        for shape in shapes:
            shape.draw(frames[t])
        for shape in shapes:
            shape.advance(canvas)
    return frames


def generate_synthetic(spec: SyntheticSpec, n_sequences: int, length: int) -> SequenceDataset:
    if n_sequences < 1 or length < 1:
        raise ValueError(f"Need at least one sequence of one frame, got {n_sequences}x{length}")
    rng = np.random.default_rng(spec.seed)
    recordings = []
    for _ in range(n_sequences):
        shapes = []
        for _ in range(spec.shape_count):
            size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            shapes.append(
                MovingShape(
                    kind=spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))],
                    size=size,
                    color=tuple(int(c) for c in rng.integers(64, 256, size=3)),
                    x=int(rng.integers(0, spec.canvas - size + 1)),
                    y=int(rng.integers(0, spec.canvas - size + 1)),
                    vx=int(rng.integers(spec.velocity_x[0], spec.velocity_x[1] + 1)),
                    vy=int(rng.integers(spec.velocity_y[0], spec.velocity_y[1] + 1)),
                )
            )
        frames = render_frames(shapes, spec.canvas, length, spec.channels)
        recordings.append(to_unit_range(frames))
    logging.info(f"Generated {n_sequences} synthetic sequences of {length} frames")
    return SequenceDataset(recordings)


def window_starts(lengths: Sequence[int], length: int, stride: int) -> list[tuple[int, int]]:
    """(recording index, first frame) of every window that fits inside a recording."""
    if length < 1 or stride < 1:
        raise ValueError(f"Window length and stride must be positive, got {length}, {stride}")
    starts = []
    for index, count in enumerate(lengths):
        starts.extend((index, start) for start in range(0, count - length + 1, stride))
    return starts


def slice_sequences(dataset: SequenceDataset, length: int, stride: int) -> Iterator[np.ndarray]:
    """Yield (length, C, H, W) windows; recordings shorter than `length` are skipped."""
    skipped = sum(1 for n in dataset.lengths if n < length)
    if skipped:
        logging.warning(f"Skipping {skipped} recordings shorter than {length} frames")
    for index, start in window_starts(dataset.lengths, length, stride):
        yield dataset.recordings[index][start : start + length]


def stack_windows(dataset: SequenceDataset, length: int, stride: int) -> np.ndarray:
    windows = list(slice_sequences(dataset, length, stride))
    if not windows:
        raise ValueError(f"No recording holds a window of {length} frames")
    return np.stack(windows)


def split_recordings(
    dataset: SequenceDataset, fraction: float
) -> tuple[SequenceDataset, SequenceDataset]:
    """Split off the last `fraction` of the recordings (at least one) for validation."""
    if not 0 < fraction < 1:
        raise ValueError(f"Validation fraction must lie in (0, 1), got {fraction}")
    if len(dataset) < 2:
        raise ValueError("Splitting needs at least two recordings")
    held_out = min(len(dataset) - 1, max(1, round(fraction * len(dataset))))
    cut = len(dataset) - held_out
    return (
        SequenceDataset(dataset.recordings[:cut], dataset.names[:cut], dataset.fps),
        SequenceDataset(dataset.recordings[cut:], dataset.names[cut:], dataset.fps),
    )

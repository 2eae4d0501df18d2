from __future__ import annotations

import csv
import logging
import math
import os
from typing import Any, Iterable, Sequence

import numpy as np

from precoder.data import SequenceDataset, to_bytes, to_unit_range
from precoder.precnet import NetworkConfig, NetworkWeights, build_variant, count_parameters
from precoder.util import dump_yaml, load_yaml

CHECKPOINT_FORMAT = "precoder-checkpoint"
CHECKPOINT_MANIFEST = "checkpoint.yaml"
CHECKPOINT_BLOB = "checkpoint.bin"
DOUBLE_BLOB = "checkpoint.f64.bin"
DATASET_MANIFEST = "dataset.yaml"
BLOB_DTYPE = "<f4"
DOUBLE_DTYPE = "<f8"

WHITESPACE = b" \t\n\r\v\f"


class PixmapError(ValueError):
    def __init__(self, path: str, offset: int, reason: str) -> None:
        super().__init__(f"Malformed pixmap {path} at byte {offset}: {reason}")
        self.path = path
        self.offset = offset


class CheckpointError(ValueError):
    pass


def read_ppm(path: str) -> np.ndarray:
    """Read a binary 8-bit P6 pixmap into a (height, width, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise PixmapError(path, 0, f"expected magic number P6, got {data[:2]!r}")
    offset = 2
    fields = []
    while len(fields) < 3:
        start = offset
        while offset < len(data) and data[offset] in WHITESPACE:
            offset += 1
        if offset < len(data) and data[offset : offset + 1] == b"#":
            while offset < len(data) and data[offset : offset + 1] not in (b"\n", b"\r"):
                offset += 1
            continue
        if offset == start:
            raise PixmapError(path, offset, "expected whitespace between header fields")
        token_start = offset
        while offset < len(data) and data[offset] not in WHITESPACE and data[offset] != ord("#"):
            offset += 1
        token = data[token_start:offset]
        if not token.isdigit():
            raise PixmapError(path, token_start, f"expected a decimal number, got {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PixmapError(path, offset, f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PixmapError(path, offset, f"only 8-bit pixmaps (maxval 255) are read, got {maxval}")
    if offset >= len(data) or data[offset] not in WHITESPACE:
        raise PixmapError(path, offset, "expected a single whitespace byte before the raster")
    offset += 1
    expected = width * height * 3
    if len(data) - offset < expected:
        raise PixmapError(path, offset, f"raster holds {len(data) - offset} of {expected} bytes")
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset)
    return raster.reshape(height, width, 3)


def write_ppm(path: str, pixels: np.ndarray) -> None:
    """Write a (height, width, 3) uint8 array as a binary P6 pixmap."""
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"Expected a (height, width, 3) uint8 array, got {pixels.shape}")
    height, width, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def frame_to_pixels(frame: np.ndarray) -> np.ndarray:
    """(C, H, W) frame in [0, 1] to (H, W, 3) bytes; single-channel frames become gray."""
    pixels = to_bytes(frame)
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    if pixels.shape[0] != 3:
        raise ValueError(f"Only 1- or 3-channel frames can be written, got {pixels.shape[0]}")
    return pixels.transpose(1, 2, 0)


def save_frames(directory: str, frames: Iterable[np.ndarray]) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for index, frame in enumerate(frames):
        path = os.path.join(directory, f"frame_{index:06d}.ppm")
        write_ppm(path, frame_to_pixels(frame))
        paths.append(path)
    return paths


def save_dataset(dataset: SequenceDataset, root: str) -> None:
    """dataset_root/recording_XXXX/frame_XXXXXX.ppm plus a dataset manifest."""
    os.makedirs(root, exist_ok=True)
    for name, recording in zip(dataset.names, dataset.recordings):
        save_frames(os.path.join(root, name), recording)
    channels, height, width = dataset.frame_shape
    manifest = {
        "channels": channels,
        "height": height,
        "width": width,
        "fps": dataset.fps,
        "recordings": [
            {"name": name, "frames": length}
            for name, length in zip(dataset.names, dataset.lengths)
        ],
    }
    dump_yaml(os.path.join(root, DATASET_MANIFEST), manifest)
    logging.info(f"Wrote {len(dataset)} recordings to {root}")


def load_frames(root: str, every: int = 1) -> SequenceDataset:
    """Load every recording subdirectory of `root`, in lexicographic order.

    `every=3` keeps every third frame (e.g. 30 fps down to 10 fps).
    """
    if every < 1:
        raise ValueError(f"Frame subsampling step must be positive, got {every}")
    if not os.path.isdir(root):
        raise FileNotFoundError(f"Dataset directory {root} does not exist")
    fps = None
    manifest_path = os.path.join(root, DATASET_MANIFEST)
    if os.path.exists(manifest_path):
        fps = load_yaml(manifest_path).get("fps")
    names, recordings = [], []
    for name in sorted(os.listdir(root)):
        directory = os.path.join(root, name)
        if not os.path.isdir(directory):
            continue
        files = sorted(f for f in os.listdir(directory) if f.endswith(".ppm"))[::every]
        if not files:
            logging.warning(f"Skipping {directory}: no .ppm frames")
            continue
        frames = [read_ppm(os.path.join(directory, f)) for f in files]
        shapes = {frame.shape for frame in frames}
        if len(shapes) > 1:
            raise ValueError(f"Frames of recording {name} have inconsistent dims {sorted(shapes)}")
        recordings.append(to_unit_range(np.stack(frames).transpose(0, 3, 1, 2)))
        names.append(name)
    if fps is not None and every > 1:
        fps = fps / every
    logging.info(f"Loaded {len(recordings)} recordings from {root}")
    return SequenceDataset(recordings, names, fps)


def save_checkpoint(
    directory: str,
    weights: NetworkWeights,
    adam: Any | None = None,
    epoch: int = 0,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write a YAML manifest plus one flat little-endian 32-bit float blob.

    The manifest lists each tensor's name, shape and byte offset; optimizer moments, when
    given, follow the parameters in the blob. Double-precision weights are also written to a
    64-bit blob, with its byte offsets under `double_offset`, so they reload exactly.
    """
    os.makedirs(directory, exist_ok=True)
    named = list(weights.parameters())
    precision = "double" if named[0][1].dtype == np.float64 else "single"
    blobs = [(CHECKPOINT_BLOB, BLOB_DTYPE, "offset")]
    if precision == "double":
        blobs.append((DOUBLE_BLOB, DOUBLE_DTYPE, "double_offset"))
    arrays = [(name, tensor.data) for name, tensor in named]
    if adam is not None:
        arrays += [(f"adam.m.{name}", m) for (name, _), m in zip(named, adam.m)]
        arrays += [(f"adam.v.{name}", v) for (name, _), v in zip(named, adam.v)]
    entries = [{"name": name, "shape": list(array.shape)} for name, array in arrays]
    for filename, dtype, key in blobs:
        offset = 0
        with open(os.path.join(directory, filename), "wb") as f:
            for entry, (_, array) in zip(entries, arrays):
                entry[key] = offset
                data = np.ascontiguousarray(array, dtype=dtype).tobytes()
                f.write(data)
                offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": BLOB_DTYPE,
        "precision": precision,
        "epoch": epoch,
        "network": weights.config.to_dict(),
        "parameter_count": sum(t.size for _, t in named),
        "tensors": entries,
    }
    if precision == "double":
        manifest["double_blob"] = {"file": DOUBLE_BLOB, "dtype": DOUBLE_DTYPE}
    if adam is not None:
        manifest["optimizer"] = adam.hyperparameters()
    if extra:
        manifest.update(extra)
    dump_yaml(os.path.join(directory, CHECKPOINT_MANIFEST), manifest)
    logging.info(f"Saved checkpoint at epoch {epoch} to {directory}")


def load_checkpoint(directory: str) -> tuple[NetworkWeights, dict[str, np.ndarray], dict]:
    """Return (weights, optimizer moment arrays by name, manifest).

    Double-precision checkpoints read the 64-bit blob; everything else reads the 32-bit one.
    """
    manifest_path = os.path.join(directory, CHECKPOINT_MANIFEST)
    try:
        manifest = load_yaml(manifest_path)
    except ValueError as e:
        raise CheckpointError(f"Cannot parse checkpoint manifest {manifest_path}: {e}")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")
    precision = checkpoint_precision(manifest)
    filename, dtype, key = CHECKPOINT_BLOB, BLOB_DTYPE, "offset"
    if precision == "double":
        filename, dtype, key = DOUBLE_BLOB, DOUBLE_DTYPE, "double_offset"
    try:
        config = NetworkConfig.from_dict(manifest["network"])
        if manifest["dtype"] != BLOB_DTYPE:
            raise CheckpointError(f"Unsupported checkpoint dtype {manifest['dtype']}")
        entries = manifest["tensors"]
        tensors = {e["name"]: (tuple(e["shape"]), int(e[key])) for e in entries}
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Incomplete checkpoint manifest {manifest_path}: {e}")

    with open(os.path.join(directory, filename), "rb") as f:
        blob = f.read()
    itemsize = np.dtype(dtype).itemsize
    expected_size = sum(math.prod(shape) for shape, _ in tensors.values()) * itemsize
    if len(blob) != expected_size:
        raise CheckpointError(f"{filename} holds {len(blob)} bytes, expected {expected_size}")

    weights = build_variant(config, seed=None)
    total = 0
    for name, tensor in weights.parameters():
        if name not in tensors:
            raise CheckpointError(f"Checkpoint lacks parameter {name}")
        shape, offset = tensors[name]
        if shape != tensor.shape:
            raise CheckpointError(f"Parameter {name} has shape {shape}, expected {tensor.shape}")
        tensor.data = _read_slice(blob, offset, shape, dtype)
        total += tensor.size
    if total != count_parameters(config):
        expected = count_parameters(config)
        raise CheckpointError(f"Checkpoint holds {total} parameters, expected {expected}")
    moments = {
        name: _read_slice(blob, offset, shape, dtype)
        for name, (shape, offset) in tensors.items()
        if name.startswith("adam.")
    }
    logging.info(f"Loaded checkpoint with {total} parameters from {directory}")
    return weights, moments, manifest


def checkpoint_precision(manifest: dict[str, Any]) -> str:
    precision = manifest.get("precision", "single")
    if precision not in ("single", "double"):
        raise CheckpointError(f"Unknown checkpoint precision {precision!r}")
    return precision


def _read_slice(blob: bytes, offset: int, shape: Sequence[int], dtype: str) -> np.ndarray:
    """`shape` values of `dtype` starting at byte `offset`, in the matching working precision."""
    itemsize = np.dtype(dtype).itemsize
    count = math.prod(shape)
    if offset < 0 or offset % itemsize or offset + count * itemsize > len(blob):
        raise CheckpointError(f"Tensor at byte offset {offset} does not fit the blob")
    values = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    target = np.float64 if dtype == DOUBLE_DTYPE else np.float32
    return values.astype(target).reshape(shape)


def write_loss_history(path: str, history: Iterable[Any]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for record in history:
            val_loss = "" if record.val_loss is None else repr(float(record.val_loss))
            writer.writerow([record.epoch, repr(float(record.train_loss)), val_loss])
    logging.info(f"Wrote loss history to {path}")


def write_metric_rows(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    logging.info(f"Wrote {path}")

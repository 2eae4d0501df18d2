import csv
import os

import numpy as np
import pytest

from precoder.data import SyntheticSpec, generate_synthetic
from precoder.io import (
    CHECKPOINT_BLOB,
    CHECKPOINT_MANIFEST,
    DOUBLE_BLOB,
    CheckpointError,
    PixmapError,
    frame_to_pixels,
    load_checkpoint,
    load_frames,
    read_ppm,
    save_checkpoint,
    save_dataset,
    save_frames,
    write_loss_history,
    write_metric_rows,
    write_ppm,
)
from precoder.precnet import NetworkConfig, build_variant
from precoder.tensor import precision
from precoder.training import AdamState, EpochRecord
from precoder.util import load_yaml


def write_bytes(path, content):
    with open(path, "wb") as f:
        f.write(content)
    return str(path)


def test_ppm_round_trip(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = str(tmp_path / "frame.ppm")
    write_ppm(path, pixels)
    with open(path, "rb") as f:
        assert f.read(11) == b"P6\n7 5\n255\n"
    np.testing.assert_array_equal(read_ppm(path), pixels)


def test_ppm_header_comments(tmp_path):
    path = write_bytes(tmp_path / "c.ppm", b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6)))
    np.testing.assert_array_equal(read_ppm(path), [[[0, 1, 2], [3, 4, 5]]])


@pytest.mark.parametrize(
    "content, offset",
    [
        (b"P3\n1 1\n255\n\x00\x00\x00", 0),
        (b"P61 1\n255\n\x00\x00\x00", 2),
        (b"P6\n4 x\n255\n", 5),
        (b"P6\n1 1\n65535\n\x00\x00\x00", 12),
        (b"P6\n2 2\n255\n\x00\x00\x00", 11),
    ],
)
def test_malformed_ppm_reports_offset(tmp_path, content, offset):
    path = write_bytes(tmp_path / "bad.ppm", content)
    with pytest.raises(PixmapError) as error:
        read_ppm(path)
    assert error.value.offset == offset
    assert error.value.path == path


def test_write_ppm_rejects_float_frames(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(str(tmp_path / "x.ppm"), np.zeros((2, 2, 3)))


def test_frame_to_pixels():
    gray = np.full((1, 2, 3), 1.0)
    pixels = frame_to_pixels(gray)
    assert pixels.shape == (2, 3, 3)
    assert (pixels == 255).all()
    with pytest.raises(ValueError):
        frame_to_pixels(np.zeros((2, 2, 2)))


def test_load_frames_scales_and_subsamples(tmp_path):
    frames = [np.full((3, 4, 4), value) for value in (0.0, 1.0, 0.0, 1.0, 0.0)]
    save_frames(str(tmp_path / "clip"), frames)
    dataset = load_frames(str(tmp_path))
    assert dataset.names == ["clip"]
    assert dataset.recordings[0].dtype == np.float32
    assert dataset.recordings[0][1].min() == 1.0
    every_other = load_frames(str(tmp_path), every=2)
    assert every_other.lengths == [3]
    assert not every_other.recordings[0].any()
    with pytest.raises(FileNotFoundError):
        load_frames(str(tmp_path / "missing"))
    with pytest.raises(ValueError):
        load_frames(str(tmp_path), every=0)


def test_dataset_round_trip_is_exact(tmp_path):
    dataset = generate_synthetic(SyntheticSpec(canvas=8, size_range=(2, 4), seed=2), 3, 4)
    save_dataset(dataset, str(tmp_path))
    loaded = load_frames(str(tmp_path))
    assert loaded.names == dataset.names
    for a, b in zip(dataset.recordings, loaded.recordings):
        np.testing.assert_array_equal(a, b)
    manifest = load_yaml(str(tmp_path / "dataset.yaml"))
    assert manifest["recordings"][0] == {"name": "recording_0000", "frames": 4}


def test_checkpoint_round_trip(tmp_path):
    weights = build_variant(NetworkConfig.from_preset("tiny"), seed=1)
    adam = AdamState.for_parameters(weights.tensors())
    adam.m[0][...] = 0.5
    adam.step = 7
    save_checkpoint(str(tmp_path), weights, adam, epoch=2, extra={"note": "kept"})
    loaded, moments, manifest = load_checkpoint(str(tmp_path))
    assert loaded.config == weights.config
    for a, b in zip(weights.tensors(), loaded.tensors()):
        assert b.dtype == np.float32
        np.testing.assert_array_equal(a.data, b.data)
    names = [name for name, _ in weights.parameters()]
    restored = AdamState.from_checkpoint(names, moments, manifest["optimizer"])
    assert restored.step == 7
    assert (restored.m[0] == 0.5).all()
    assert manifest["epoch"] == 2 and manifest["note"] == "kept"
    assert manifest["dtype"] == "<f4"


def test_checkpoint_offsets_are_bytes_into_a_float32_blob(tmp_path):
    weights = build_variant(NetworkConfig.from_preset("tiny"), seed=1)
    save_checkpoint(str(tmp_path), weights)
    manifest = load_yaml(str(tmp_path / CHECKPOINT_MANIFEST))
    offset = 0
    for entry, (name, tensor) in zip(manifest["tensors"], weights.parameters()):
        assert entry["name"] == name
        assert entry["offset"] == offset
        offset += 4 * tensor.size
    blob = np.fromfile(str(tmp_path / CHECKPOINT_BLOB), dtype="<f4")
    assert blob.nbytes == offset
    entry = manifest["tensors"][3]
    start = entry["offset"] // 4
    stored = blob[start : start + int(np.prod(entry["shape"]))].reshape(entry["shape"])
    np.testing.assert_array_equal(stored, weights.tensors()[3].data)
    assert not (tmp_path / DOUBLE_BLOB).exists()


def test_double_precision_checkpoint(tmp_path):
    with precision("double"):
        weights = build_variant(NetworkConfig.from_preset("tiny"), seed=2)
    save_checkpoint(str(tmp_path), weights)
    loaded, moments, manifest = load_checkpoint(str(tmp_path))
    assert manifest["dtype"] == "<f4"
    assert manifest["precision"] == "double"
    assert moments == {}
    single_size = (tmp_path / CHECKPOINT_BLOB).stat().st_size
    assert (tmp_path / DOUBLE_BLOB).stat().st_size == 2 * single_size
    for a, b in zip(weights.tensors(), loaded.tensors()):
        assert b.dtype == np.float64
        np.testing.assert_array_equal(a.data, b.data)


def test_corrupted_checkpoints_are_rejected(tmp_path):
    weights = build_variant(NetworkConfig.from_preset("tiny"), seed=0)
    save_checkpoint(str(tmp_path), weights)
    blob = tmp_path / CHECKPOINT_BLOB
    data = blob.read_bytes()
    blob.write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))
    blob.write_bytes(data)
    manifest = tmp_path / CHECKPOINT_MANIFEST
    manifest.write_text("format: [unterminated\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))
    manifest.write_text("format: something-else\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))


def test_loss_and_metric_csv(tmp_path):
    path = str(tmp_path / "loss.csv")
    write_loss_history(path, [EpochRecord(0, 0.25, None), EpochRecord(1, 0.125, 0.5)])
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows == [["epoch", "train_loss", "val_loss"], ["0", "0.25", ""], ["1", "0.125", "0.5"]]

    path = os.path.join(tmp_path, "rows.csv")
    write_metric_rows(path, ("window", "mse"), [(0, 0.1), (1, float("inf"))])
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[1] == ["0", "0.1"]
    assert rows[2] == ["1", "inf"]

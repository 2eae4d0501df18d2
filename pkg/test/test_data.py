import numpy as np
import pytest

from precoder.data import (
    MovingShape,
    SequenceDataset,
    SyntheticSpec,
    generate_synthetic,
    render_frames,
    slice_sequences,
    split_recordings,
    stack_windows,
    to_bytes,
    to_unit_range,
    window_starts,
)


def test_pixel_scaling():
    pixels = np.array([0, 51, 255], dtype=np.uint8)
    np.testing.assert_array_equal(to_unit_range(pixels), np.array([0, 0.2, 1], dtype=np.float32))
    np.testing.assert_array_equal(to_bytes(to_unit_range(pixels)), pixels)
    np.testing.assert_array_equal(to_bytes(np.array([-0.5, 1.5])), [0, 255])


def test_zero_velocity_gives_identical_frames():
    spec = SyntheticSpec(canvas=16, size_range=(3, 5), velocity_x=(0, 0), velocity_y=(0, 0))
    recording = generate_synthetic(spec, 1, 6).recordings[0]
    assert recording.shape == (6, 3, 16, 16)
    assert recording.max() > 0
    for frame in recording[1:]:
        np.testing.assert_array_equal(frame, recording[0])


def test_unit_velocity_shifts_one_pixel():
    shape = MovingShape("rectangle", size=4, color=(255, 128, 64), x=2, y=5, vx=1, vy=0)
    frames = render_frames([shape], canvas=16, length=3)
    np.testing.assert_array_equal(frames[1], np.roll(frames[0], 1, axis=-1))
    np.testing.assert_array_equal(frames[2], np.roll(frames[0], 2, axis=-1))
    np.testing.assert_array_equal(frames[0][:, 5, 2:6], [[255] * 4, [128] * 4, [64] * 4])


def test_shapes_bounce_off_the_border():
    shape = MovingShape("disc", size=4, color=(255, 255, 255), x=12, y=0, vx=1, vy=-2)
    shape.advance(16)
    assert (shape.x, shape.vx) == (11, -1)
    assert (shape.y, shape.vy) == (2, 2)


def test_generation_is_deterministic():
    spec = SyntheticSpec(canvas=16, size_range=(3, 6), seed=3)
    first = generate_synthetic(spec, 3, 5)
    second = generate_synthetic(spec, 3, 5)
    for a, b in zip(first.recordings, second.recordings):
        np.testing.assert_array_equal(a, b)
    other = generate_synthetic(SyntheticSpec(canvas=16, size_range=(3, 6), seed=4), 3, 5)
    assert any((a != b).any() for a, b in zip(first.recordings, other.recordings))


def test_single_channel_generation():
    dataset = generate_synthetic(SyntheticSpec(canvas=8, size_range=(2, 3), channels=1), 2, 3)
    assert dataset.frame_shape == (1, 8, 8)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(canvas=30)
    with pytest.raises(ValueError):
        SyntheticSpec(canvas=8, size_range=(2, 12))
    with pytest.raises(ValueError):
        SyntheticSpec(shape_kinds=("triangle",))
    with pytest.raises(ValueError):
        SyntheticSpec(channels=4)
    with pytest.raises(ValueError):
        SyntheticSpec.from_dict({"canvas": 16, "colour": "red"})
    spec = SyntheticSpec(canvas=16, seed=9)
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_dataset_validation():
    with pytest.raises(ValueError):
        SequenceDataset([np.full((2, 3, 4, 4), 1.5)])
    with pytest.raises(ValueError):
        SequenceDataset([np.zeros((2, 3, 4, 4)), np.zeros((2, 3, 4, 8))])
    with pytest.raises(ValueError):
        SequenceDataset([np.zeros((3, 4, 4))])
    dataset = SequenceDataset([np.zeros((2, 3, 4, 6))])
    assert dataset.names == ["recording_0000"]
    with pytest.raises(ValueError):
        dataset.check_divisible(4)


def test_window_counts():
    assert len(window_starts([25], 11, 11)) == 2
    assert window_starts([25], 11, 11) == [(0, 0), (0, 11)]
    assert len(window_starts([10, 12], 10, 1)) == 4
    with pytest.raises(ValueError):
        window_starts([10], 0, 1)


def test_short_recordings_are_skipped():
    dataset = SequenceDataset([np.zeros((4, 1, 4, 4)), np.ones((12, 1, 4, 4))])
    windows = list(slice_sequences(dataset, 10, 1))
    assert len(windows) == 3
    assert all(w.shape == (10, 1, 4, 4) and w.min() == 1 for w in windows)
    assert stack_windows(dataset, 10, 2).shape == (2, 10, 1, 4, 4)
    with pytest.raises(ValueError):
        stack_windows(dataset, 13, 1)


def test_split_recordings():
    dataset = SequenceDataset([np.zeros((2, 1, 4, 4)) for _ in range(10)])
    train, held_out = split_recordings(dataset, 0.1)
    assert (len(train), len(held_out)) == (9, 1)
    assert held_out.names == ["recording_0009"]
    train, held_out = split_recordings(SequenceDataset(dataset.recordings[:2]), 0.01)
    assert (len(train), len(held_out)) == (1, 1)
    with pytest.raises(ValueError):
        split_recordings(dataset, 1.0)

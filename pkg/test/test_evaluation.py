import numpy as np
import pytest

from precoder.data import SyntheticSpec, generate_synthetic
from precoder.evaluation import (
    NEXT_FRAME_HEADER,
    ROLLOUT_HEADER,
    evaluate_next_frame,
    evaluate_rollout,
    map_batches,
)
from precoder.metrics import mse, ssim
from precoder.precnet import NetworkConfig, build_variant
from precoder.util import thread_count


@pytest.fixture
def dataset():
    spec = SyntheticSpec(canvas=12, shape_count=1, size_range=(3, 5), seed=5)
    return generate_synthetic(spec, 5, 11)


@pytest.fixture
def weights():
    return build_variant(NetworkConfig.from_preset("tiny"), seed=3)


def test_baseline_columns(dataset, weights):
    result = evaluate_next_frame(weights, dataset, batch_size=2)
    assert result.model.frame_count == result.baseline.frame_count == 5
    for recording, value, similarity in zip(
        dataset.recordings, result.baseline.mse, result.baseline.ssim
    ):
        assert value == mse(recording[-2], recording[-1])
        assert similarity == ssim(recording[-2], recording[-1])
    rows = list(result.rows())
    assert len(rows) == 5 and len(rows[0]) == len(NEXT_FRAME_HEADER)
    assert set(result.summary()) == {"model", "baseline"}


def test_first_rollout_step_equals_next_frame(dataset, weights):
    next_frame = evaluate_next_frame(weights, dataset)
    rollout = evaluate_rollout(weights, dataset, horizon=1, keep_predictions=True)
    assert rollout.horizon == 1
    assert rollout.per_step[0].mse == next_frame.model.mse
    assert rollout.per_step[0].ssim == next_frame.model.ssim
    assert rollout.predictions[0].shape == (1, 3, 12, 12)


def test_rollout_rows(weights):
    spec = SyntheticSpec(canvas=12, shape_count=1, size_range=(3, 5), seed=6)
    long_dataset = generate_synthetic(spec, 2, 9)
    result = evaluate_rollout(weights, long_dataset, context=4, horizon=4)
    rows = list(result.rows())
    assert [row[0] for row in rows] == [1, 2, 3, 4]
    assert all(len(row) == len(ROLLOUT_HEADER) and row[1] == 2 for row in rows)
    assert list(result.summary()) == [1, 2, 3, 4]
    assert result.predictions == []


def test_results_do_not_depend_on_thread_count(dataset, weights, monkeypatch):
    results = []
    for threads in ("1", "3"):
        monkeypatch.setenv("PRECODER_THREADS", threads)
        assert thread_count() == int(threads)
        result = evaluate_rollout(weights, dataset, horizon=1, batch_size=1)
        results.append(result.per_step[0].mse)
    assert results[0] == results[1]


def test_map_batches_keeps_order(monkeypatch):
    monkeypatch.setenv("PRECODER_THREADS", "4")
    batches = [np.full(2, i) for i in range(9)]
    out = map_batches(lambda batch: batch * 2, batches)
    assert [int(b[0]) for b in out] == [2 * i for i in range(9)]


def test_thread_count_validation(monkeypatch):
    monkeypatch.setenv("PRECODER_THREADS", "0")
    with pytest.raises(ValueError):
        thread_count()
    monkeypatch.setenv("PRECODER_THREADS", "many")
    with pytest.raises(ValueError):
        thread_count()


def test_evaluation_rejections(dataset, weights):
    with pytest.raises(ValueError):
        evaluate_next_frame(weights, dataset, context=0)
    with pytest.raises(ValueError):
        evaluate_rollout(weights, dataset, horizon=0)
    with pytest.raises(ValueError):
        evaluate_rollout(weights, dataset, context=10, horizon=2)
    with pytest.raises(ValueError):
        evaluate_next_frame(weights, dataset, batch_size=0)

import math
import os

import numpy as np
import pytest

from data import Dataset, load_cifar10, make_synthetic, one_hot
from errors import NonFiniteError, ShapeError, TrainingDiverged
from models import FULL_PRECISION, ModelConfig, ModelKind, build_model
from quantizer import grid_values
from tensor import Prng, Tensor, tensor
from train import (
    METRICS_HEADER,
    REFERENCE_EPOCHS,
    SGD,
    OptState,
    TrainConfig,
    cross_entropy,
    evaluate,
    fit,
    read_metrics_csv,
    sgd_momentum_step,
    train_epoch,
)


def fcnn1(n_values=FULL_PRECISION, seed=0):
    return build_model(ModelConfig(kind=ModelKind.FCNN1, n_values=n_values, seed=seed))


# --- loss -------------------------------------------------------------------

def test_uniform_prediction_costs_ln_10():
    loss = cross_entropy(tensor(np.full((4, 10), 0.1)), tensor(one_hot([0, 3, 5, 9])))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-5)


def test_perfect_prediction_costs_nothing():
    y = tensor(one_hot([1, 2]))
    assert abs(cross_entropy(y, y).item()) <= 1e-6


def test_cross_entropy_hand_batch():
    pred = np.array([[0.7, 0.2, 0.1], [0.25, 0.25, 0.5]])
    target = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    expected = -(math.log(0.7 + 1e-9) + math.log(0.5 + 1e-9)) / 2
    assert cross_entropy(tensor(pred, dtype=np.float64), tensor(target, dtype=np.float64)).item() == \
        pytest.approx(expected, abs=1e-6)


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ShapeError):
        cross_entropy(tensor(np.full((2, 10), 0.1)), tensor(np.zeros((2, 9))))


# --- optimizer --------------------------------------------------------------

def test_momentum_steps_follow_heavy_ball_recurrence():
    w = Tensor(np.array([1.0]), requires_grad=True)
    state = OptState()
    sgd_momentum_step([w], [np.array([0.5])], state, lr=0.1, mu=0.92)
    assert state.velocities[0][0] == pytest.approx(0.5)
    assert w.data[0] == pytest.approx(0.95)
    sgd_momentum_step([w], [np.array([0.5])], state, lr=0.1, mu=0.92)
    assert state.velocities[0][0] == pytest.approx(0.96)
    assert w.data[0] == pytest.approx(0.854)


def test_zero_gradient_converges_geometrically():
    w = Tensor(np.array([1.0]), requires_grad=True)
    state = OptState()
    sgd_momentum_step([w], [np.array([0.5])], state, lr=0.1)
    for _ in range(400):
        sgd_momentum_step([w], [np.array([0.0])], state, lr=0.1)
    assert w.data[0] == pytest.approx(0.95 - 0.1 * 0.5 * 0.92 / 0.08, abs=1e-9)


def test_momentum_shape_mismatch():
    w = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        sgd_momentum_step([w], [np.zeros(4)], OptState(), lr=0.1)


def test_sgd_class_uses_zero_for_missing_gradients():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = np.array([1.0, 2.0])
    optimizer = SGD([a, b], lr=0.5, momentum=0.0)
    optimizer.step()
    assert a.data.tolist() == [0.5, 0.0]
    assert b.data.tolist() == [1.0, 1.0]
    optimizer.zero_grad()
    assert a.grad is None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_reference_epoch_budgets():
    assert REFERENCE_EPOCHS[("FCNN", False)] == 200
    assert REFERENCE_EPOCHS[("VIT", True)] == 2000


# --- evaluation -------------------------------------------------------------

class LabelReadingModel:
    """Predicts the class written into pixel (0, 0, 0) as label / 10."""

    def __call__(self, x, training=False, rng=None):
        return tensor(one_hot(np.rint(x.data[:, 0, 0, 0] * 10).astype(int)))


def test_evaluate_all_correct_predictions():
    labels = np.arange(10).repeat(3)
    images = np.broadcast_to((labels / 10.0)[:, None, None, None], (30, 32, 32, 3))
    loss, accuracy = evaluate(LabelReadingModel(), Dataset(images, labels), batch_size=7)
    assert accuracy == 1.0
    assert abs(loss) <= 1e-6


def test_untrained_model_is_at_chance_and_evaluate_is_pure():
    rng = Prng(21)
    ds = Dataset(rng.uniform(size=(1000, 32, 32, 3)), np.tile(np.arange(10), 100), "test")
    model = fcnn1(n_values=5)
    first = evaluate(model, ds)
    assert first == evaluate(model, ds)
    assert abs(first[1] - 0.1) <= 0.05


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(ValueError):
        evaluate(fcnn1(), Dataset(np.zeros((0, 32, 32, 3)), np.zeros(0, dtype=int)))


# --- epochs -----------------------------------------------------------------

def test_full_precision_loss_decreases_over_first_epochs():
    train, val = make_synthetic(10, seed=0), make_synthetic(2, seed=0, split="test")
    rows = fit(fcnn1(), train, val, TrainConfig(epochs=5))
    losses = [row.train_loss for row in rows]
    assert len(rows) == 5
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))
    assert all(row.epoch_time_s == 0.0 for row in rows)


def test_identical_seeds_give_identical_metrics():
    train, val = make_synthetic(3, seed=1), make_synthetic(1, seed=1, split="test")
    cfg = TrainConfig(epochs=2, batch_size=8, lr=0.01, augment=True, seed=3)
    assert fit(fcnn1(5), train, val, cfg) == fit(fcnn1(5), train, val, cfg)


def test_masters_stay_off_grid_while_their_image_stays_on_it():
    train, val = make_synthetic(2, seed=2), make_synthetic(1, seed=2, split="test")
    model = fcnn1(n_values=3)
    before = model.dense[0].weight.data.copy()
    fit(model, train, val, TrainConfig(epochs=1, batch_size=5, lr=0.01))
    layer = model.dense[0]
    assert not np.array_equal(layer.weight.data, before)
    assert layer.weight.dtype == np.float32
    assert set(np.unique(layer.quantize().w_q.data)) <= set(grid_values(3).values)
    assert len(np.unique(layer.weight.data)) > 1000


def test_nan_aborts_with_the_batch_index():
    train, val = make_synthetic(1, seed=0), make_synthetic(1, seed=0, split="test")
    model = fcnn1()
    model.dense[0].weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_epoch(model, train, val, TrainConfig(), SGD(model.parameters(), 0.001), epoch=1)
    assert (info.value.epoch, info.value.batch_index) == (1, 0)


def test_overflowing_update_on_the_only_batch_aborts():
    train, val = make_synthetic(4, seed=0), make_synthetic(1, seed=0, split="test")
    model = fcnn1(n_values=5)
    cfg = TrainConfig(lr=1e30, batch_size=100)
    with pytest.raises(TrainingDiverged) as info:
        train_epoch(model, train, val, cfg, SGD(model.parameters(), cfg.lr), epoch=1)
    assert (info.value.epoch, info.value.batch_index) == (1, 0)


def test_momentum_step_rejects_non_finite_masters():
    p = Tensor(np.array([3e38], dtype=np.float32), requires_grad=True)
    with pytest.raises(NonFiniteError):
        sgd_momentum_step([p], [np.array([-1.0], dtype=np.float32)], OptState(), lr=1e38)


def test_metrics_csv_has_frozen_header(tmp_path):
    train, val = make_synthetic(1, seed=0), make_synthetic(1, seed=0, split="test")
    path = tmp_path / "metrics.csv"
    rows = fit(fcnn1(), train, val, TrainConfig(epochs=2), metrics_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) == "epoch,train_loss,train_acc,val_loss,val_acc,epoch_time_s"
    assert len(lines) == 3
    loaded = read_metrics_csv(path)
    assert [r.epoch for r in loaded] == [1, 2]
    assert loaded[0].train_loss == pytest.approx(rows[0].train_loss, abs=1e-8)


# --- desk-scale learning ----------------------------------------------------

def _final_train_accuracy(n_values):
    train, val = make_synthetic(10, seed=0), make_synthetic(5, seed=0, split="test")
    rows = fit(fcnn1(n_values), train, val, TrainConfig(epochs=50, batch_size=10, lr=0.01))
    return max(row.train_acc for row in rows[-5:])


@pytest.mark.slow
def test_low_bit_and_full_precision_both_fit_synthetic_set():
    quantized = _final_train_accuracy(5)
    baseline = _final_train_accuracy(FULL_PRECISION)
    assert quantized >= 0.95
    assert baseline >= 0.95
    assert abs(baseline - quantized) <= 0.05


@pytest.mark.slow
def test_zero_in_grid_keeps_augmented_training_steadier():
    train, val = make_synthetic(10, seed=0), make_synthetic(2, seed=0, split="test")

    def tail_variance(n_values, seed):
        cfg = TrainConfig(epochs=100, batch_size=10, lr=0.01, augment=True, seed=seed)
        rows = fit(fcnn1(n_values, seed=seed), train, val, cfg)
        return float(np.var([row.train_loss for row in rows[-10:]]))

    wins = sum(tail_variance(3, seed) <= tail_variance(2, seed) for seed in range(3))
    assert wins >= 2


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("LOWBIT_DATA_DIR"), reason="LOWBIT_DATA_DIR not set")
def test_cifar_subset_learns_directionally():
    train, val = load_cifar10(os.environ["LOWBIT_DATA_DIR"])
    train, val = train.take(2000), val.take(1000)
    for n_values in (5, FULL_PRECISION):
        rows = fit(fcnn1(n_values), train, val, TrainConfig(epochs=30))
        assert rows[-1].train_loss <= 0.5 * rows[0].train_loss
        assert rows[-1].train_acc >= 0.30

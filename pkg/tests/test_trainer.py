import math

import numpy as np
import pytest

from budgetprune.budget import BudgetSpec
from budgetprune.data_io import Dataset, synthetic_splits
from budgetprune.errors import DivergenceError, UsageError
from budgetprune.models import build
from budgetprune.tensor import Tensor
from budgetprune.trainer import (SGD, EarlyStopping, ReduceOnPlateau, TrainConfig, TrainHistory,
                                 early_stop, lr_schedule_step, train)


# -- schedules ---------------------------------------------------------------


def test_plateau_ten_stagnant_epochs():
    # epoch 0 sets the best, then 10 epochs without strict improvement
    assert lr_schedule_step([50.0] * 11) == pytest.approx(0.03)
    assert lr_schedule_step([50.0] * 10) == 0.1


def test_plateau_nine_stagnant_unchanged():
    assert lr_schedule_step([50.0] + [49.0] * 9) == 0.1


def test_plateau_improvement_resets_counter():
    hist = [50.0] + [40.0] * 9 + [51.0] + [40.0] * 9
    assert lr_schedule_step(hist) == 0.1
    assert lr_schedule_step(hist + [40.0]) == pytest.approx(0.03)


def test_plateau_counter_resets_after_decay():
    hist = [50.0] * 21
    assert lr_schedule_step(hist) == pytest.approx(0.1 * 0.3 * 0.3)
    assert lr_schedule_step([50.0] * 20) == pytest.approx(0.03)


def test_plateau_equal_is_not_improvement():
    sched = ReduceOnPlateau(1.0, 0.5, 2)
    assert [sched.step(a) for a in (1, 1, 1, 2, 2, 2)] == [1.0, 1.0, 0.5, 0.5, 0.5, 0.25]


def test_plateau_needs_history():
    with pytest.raises(UsageError):
        lr_schedule_step([])


def test_early_stop_examples():
    assert early_stop([70.0] * 61)
    assert not early_stop([70.0] * 60)
    assert not early_stop([70.0] * 59)
    # improvement at the last epoch of a 60-epoch window
    assert not early_stop([70.0] * 60 + [71.0])
    assert not early_stop([70.0] + [60.0] * 58 + [71.0] + [60.0])
    assert not early_stop([])


def test_early_stopping_object():
    stop = EarlyStopping(3)
    assert [stop.step(a) for a in (1, 2, 2, 2, 2)] == [False, False, False, False, True]


def test_lr_sequence_nonincreasing():
    rng = np.random.default_rng(0)
    sched = ReduceOnPlateau(0.1)
    lrs = [sched.step(a) for a in rng.uniform(0, 100, 300)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# -- config ------------------------------------------------------------------


def test_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.lr_init, c.plateau_factor, c.plateau_patience, c.early_stop_patience,
            c.weight_decay, c.batch_size, c.momentum) == (300, 0.1, 0.3, 10, 60, 5e-5, 128, 0.9)


@pytest.mark.parametrize("bad", [dict(plateau_factor=1.0), dict(plateau_factor=0.0),
                                 dict(plateau_patience=0), dict(early_stop_patience=-1),
                                 dict(lr_init=0.0), dict(mode="adam"), dict(epochs=0),
                                 dict(momentum=1.0)])
def test_config_validation(bad):
    with pytest.raises(UsageError):
        TrainConfig(**bad)


# -- optimizer ---------------------------------------------------------------


def test_weight_decay_only_on_decay_group():
    w, b, tau = (Tensor(np.ones(3), requires_grad=True) for _ in range(3))
    for p in (w, b, tau):
        p.grad = np.zeros(3)
    SGD([w], [b], lr=0.1, momentum=0.9, weight_decay=0.5, scaled=[tau]).step()
    np.testing.assert_allclose(w.data, 1 - 0.1 * 0.5)
    assert np.array_equal(b.data, np.ones(3)) and np.array_equal(tau.data, np.ones(3))


def test_momentum_update():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([], [p], lr=0.1, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    opt.step()
    # v1 = 1, v2 = 0.9 + 1
    assert p.data[0] == pytest.approx(1 - 0.1 - 0.19)


def test_scaled_group_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    SGD([], [], lr=0.1, momentum=0.0, weight_decay=0.0, scaled=[p], lr_scale=0.5).step()
    assert p.data[0] == pytest.approx(-0.05)


# -- loop --------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    return synthetic_splits(0, 10, 300, 100, (3, 8, 8))


def test_plain_training_decreases_loss():
    tr, te = synthetic_splits(1, 10, 400, 100, (784,), margin=1.0, noise=1.0)
    model = build("mlp-toy")
    ckpt, hist = train(model, tr, te, TrainConfig(epochs=20, lr_init=0.01, batch_size=50,
                                                  mode="plain"))
    losses = [r.task_loss for r in hist.records]
    assert len(losses) == 20
    assert losses[-1] < 0.5 * losses[0]
    assert all(r.budget_loss == 0.0 for r in hist.records)


def test_reparam_requires_budget(small_data):
    tr, te = small_data
    with pytest.raises(UsageError):
        train(build("conv4-small", input_shape=(3, 8, 8)), tr, te, TrainConfig(epochs=1))
    with pytest.raises(UsageError):
        train(build("conv4-small", input_shape=(3, 8, 8)), tr, te,
              TrainConfig(epochs=1, mode="plain"), BudgetSpec(10, 0.5))
    with pytest.raises(UsageError):
        train(build("conv4-small", input_shape=(3, 8, 8)), tr, te,
              TrainConfig(epochs=1, mode="finetune"))


def _run(data, **kw):
    tr, te = data
    model = build("conv4-small", input_shape=(3, 8, 8), seed=0)
    budget = BudgetSpec(model.count_prunable(), 0.9, 5.0)
    cfg = TrainConfig(epochs=3, lr_init=0.01, batch_size=32, **kw)
    return train(model, tr, te, cfg, budget)


def test_reparam_training_is_deterministic(small_data):
    c1, h1 = _run(small_data)
    c2, h2 = _run(small_data)
    assert h1.to_jsonl() == h2.to_jsonl()
    for k in c1.tensors:
        assert np.array_equal(c1.tensors[k], c2.tensors[k])


def test_reparam_training_moves_cost_and_temperatures(small_data):
    _, hist = _run(small_data)
    first, last = hist.records[0], hist.records[-1]
    assert last.surrogate_fraction < first.surrogate_fraction
    assert last.temperatures != first.temperatures
    assert all(r.budget_loss > 0 for r in hist.records)


def test_best_checkpoint_is_max_monitored_epoch(small_data):
    ckpt, hist = _run(small_data, monitor_pruned=False)
    accs = hist.accuracies()
    assert hist.best_epoch == int(np.argmax(accs))
    assert ckpt.epoch == hist.best_epoch
    assert accs == [r.test_accuracy for r in hist.records]


def test_callback_sees_every_epoch(small_data):
    seen = []
    tr, te = small_data
    train(build("conv4-small", input_shape=(3, 8, 8)), tr, te,
          TrainConfig(epochs=2, lr_init=0.01, mode="plain"), callback=seen.append)
    assert [r.epoch for r in seen] == [0, 1]


def test_early_stopping_ends_run():
    # zero lr never improves past epoch 0
    tr, te = synthetic_splits(0, 10, 50, 50, (3, 8, 8))
    cfg = TrainConfig(epochs=50, lr_init=1e-300, early_stop_patience=3, plateau_patience=1,
                      mode="plain")
    _, hist = train(build("conv4-small", input_shape=(3, 8, 8)), tr, te, cfg)
    assert hist.stopped_early
    assert len(hist.records) == 4
    lrs = [r.lr for r in hist.records]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_divergence_raises():
    tr, te = synthetic_splits(0, 10, 40, 20, (3, 8, 8))
    bad = Dataset(np.full_like(tr.images, np.nan), tr.labels, "train", 10)
    with pytest.raises(DivergenceError):
        train(build("conv4-small", input_shape=(3, 8, 8)), bad, te,
              TrainConfig(epochs=1, mode="plain"))


def test_history_jsonl_round_trip(small_data):
    _, hist = _run(small_data)
    text = hist.to_jsonl()
    first = text.splitlines()[0]
    assert first.startswith('{"epoch": 0, "lr": ')
    assert TrainHistory.from_jsonl(text).to_jsonl() == text


def test_augment_keeps_shapes_and_runs(small_data):
    tr, te = small_data
    _, hist = train(build("conv4-small", input_shape=(3, 8, 8)), tr, te,
                    TrainConfig(epochs=1, lr_init=0.01, mode="plain", augment=True))
    assert math.isfinite(hist.records[0].task_loss)

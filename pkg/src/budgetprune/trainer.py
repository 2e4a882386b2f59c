"""SGD training loop with reduce-on-plateau and early stopping on test accuracy.

Three modes share the loop:

``reparam``  cross entropy plus ``lam`` times the budget loss, through apparent weights;
``plain``    cross entropy of the primary network (gate replaced by 1);
``finetune`` plain training of a magnitude-pruned model, gradients masked.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .budget import BudgetSpec, budget_loss, surrogate_cost, total_loss
from .data_io import Checkpoint, Dataset, fingerprint
from .errors import DivergenceError, NonFiniteError, UsageError
from .pruning import accuracy, effective_prune, sparsity_fractions

log = logging.getLogger(__name__)

TRAIN_MODES = ("reparam", "plain", "finetune")


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_init: float = 0.1
    plateau_factor: float = 0.3
    plateau_patience: int = 10
    early_stop_patience: int = 60
    weight_decay: float = 5e-5
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0
    mode: str = "reparam"
    # in reparam mode, select/schedule on accuracy after effective pruning at the budget rate
    monitor_pruned: bool = True
    augment: bool = False
    # multiplier on lr for the log-temperatures
    tau_lr_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise UsageError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if not 0 < self.plateau_factor < 1:
            raise UsageError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise UsageError("patience values must be positive")
        if not self.lr_init > 0:
            raise UsageError("lr_init must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise UsageError("epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise UsageError("momentum must lie in [0, 1) and weight_decay be >= 0")


HISTORY_FIELDS = ("epoch", "lr", "task_loss", "budget_loss", "test_accuracy",
                  "monitored_accuracy", "surrogate_fraction", "temperatures")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    task_loss: float
    budget_loss: float
    test_accuracy: float
    monitored_accuracy: float
    surrogate_fraction: float
    temperatures: list

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in HISTORY_FIELDS})


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def accuracies(self) -> list[float]:
        return [r.monitored_accuracy for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        recs = [EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(recs)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


class ReduceOnPlateau:
    """Multiply the lr by ``factor`` after ``patience`` epochs without strict improvement."""

    def __init__(self, lr: float, factor: float = 0.3, patience: int = 10):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 60):
        self.patience = patience
        self.best = -math.inf
        self.since_best = 0

    def step(self, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


def lr_schedule_step(accuracies, lr_init: float = 0.1, factor: float = 0.3, patience: int = 10) -> float:
    """Learning rate after replaying the plateau rule over an accuracy history."""
    if len(accuracies) == 0:
        raise UsageError("need at least one recorded epoch")
    sched = ReduceOnPlateau(lr_init, factor, patience)
    for a in accuracies:
        sched.step(a)
    return sched.lr


def early_stop(accuracies, patience: int = 60) -> bool:
    """True iff the last ``patience`` epochs brought no strict improvement over the best."""
    stopper = EarlyStopping(patience)
    stop = False
    for a in accuracies:
        stop = stopper.step(a)
    return stop


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Heavy-ball SGD; weight decay only on the ``decay`` group."""

    def __init__(self, decay, no_decay, lr, momentum, weight_decay, masks=None,
                 scaled=(), lr_scale=1.0):
        self.groups = [(list(decay), weight_decay, 1.0), (list(no_decay), 0.0, 1.0),
                       (list(scaled), 0.0, lr_scale)]
        self.lr = lr
        self.momentum = momentum
        self.buffers: dict[int, np.ndarray] = {}
        self.masks = masks or {}

    def step(self) -> None:
        for params, wd, scale in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad
                if wd:
                    g = g + wd * p.data
                mask = self.masks.get(id(p))
                if mask is not None:
                    g = g * mask
                buf = self.buffers.get(id(p))
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[id(p)] = buf
                p.data = p.data - (self.lr * scale) * buf
                if mask is not None:
                    p.data = p.data * mask


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def _augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random 4-pixel-pad crop and horizontal flip for (N, C, H, W) batches."""
    N, C, H, W = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(x)
    dy = rng.integers(0, 9, N)
    dx = rng.integers(0, 9, N)
    flip = rng.random(N) < 0.5
    for i in range(N):
        crop = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def _param_groups(model):
    weights = {id(r.weight) for r in model.reparam_layers()}
    taus = {id(r.tau) for r in model.reparam_layers()}
    decay, no_decay, temps = [], [], []
    for p in model.parameters():
        if id(p) in weights:
            decay.append(p)
        elif id(p) in taus:
            if model.mode == "reparam":
                temps.append(p)
        else:
            no_decay.append(p)
    return decay, no_decay, temps


def train(model, train_set: Dataset, test_set: Dataset, config: TrainConfig,
          budget: BudgetSpec | None = None, callback=None):
    """Train ``model`` in place and return ``(best checkpoint, history)``.

    The returned checkpoint holds the epoch with the highest monitored test
    accuracy (first occurrence on ties). In reparam mode with
    ``monitor_pruned`` the monitored accuracy is that of the network after
    effective pruning at the budget rate; otherwise it is the raw test
    accuracy. Raises :class:`DivergenceError` on a non-finite loss.
    """
    if config.mode == "reparam":
        if budget is None:
            raise UsageError("reparam mode needs a BudgetSpec")
        model.set_mode("reparam")
    else:
        if budget is not None and budget.lam != 0:
            raise UsageError(f"{config.mode} mode takes no budget")
        model.set_mode("plain")
    if config.mode == "finetune" and not any(r.mask is not None for r in model.reparam_layers()):
        raise UsageError("finetune mode expects a magnitude-pruned (masked) model")

    rng = np.random.default_rng(config.seed)
    decay, no_decay, temps = _param_groups(model)
    masks = {id(r.weight): r.mask for r in model.reparam_layers() if r.mask is not None}
    opt = SGD(decay, no_decay, config.lr_init, config.momentum, config.weight_decay, masks,
              temps, config.tau_lr_scale)
    sched = ReduceOnPlateau(config.lr_init, config.plateau_factor, config.plateau_patience)
    stopper = EarlyStopping(config.early_stop_patience)
    history = TrainHistory()
    reparam_layers = model.reparam_layers()
    cfg_dict = asdict(config)
    best_ckpt = None
    best = -math.inf
    n = len(train_set)

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        task_sum = budget_sum = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = train_set.images[idx].astype(model.dtype, copy=False)
            if config.augment and x.ndim == 4:
                x = _augment(x, rng)
            logits = model.forward(x)
            task = T.softmax_cross_entropy(logits, train_set.labels[idx])
            if config.mode == "reparam":
                bl = budget_loss(surrogate_cost(reparam_layers), budget)
                loss = total_loss(task, bl, budget.lam)
                budget_sum += float(bl.data)
            else:
                loss = task
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batches}")
            model.zero_grad()
            try:
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {batches}: {exc}") from exc
            opt.step()
            if temps and not all(0.0 < t < math.inf for t in model.temperatures()):
                raise DivergenceError(f"temperature left (0, inf) at epoch {epoch}, batch {batches}")
            task_sum += float(task.data)
            batches += 1

        test_acc = accuracy(model, test_set)
        monitored = test_acc
        if config.mode == "reparam" and config.monitor_pruned:
            monitored = accuracy(effective_prune(model, budget.prune_rate), test_set)
        rec = EpochRecord(
            epoch=epoch,
            lr=opt.lr,
            task_loss=task_sum / batches,
            budget_loss=budget_sum / batches,
            test_accuracy=test_acc,
            monitored_accuracy=monitored,
            surrogate_fraction=sparsity_fractions(model)["surrogate"],
            temperatures=model.temperatures(),
        )
        history.records.append(rec)
        log.info("epoch %d lr %.4g task %.4f budget %.5f acc %.2f mon %.2f frac %.4f",
                 epoch, rec.lr, rec.task_loss, rec.budget_loss, test_acc, monitored,
                 rec.surrogate_fraction)
        if callback is not None:
            callback(rec)
        if monitored > best:
            best = monitored
            history.best_epoch = epoch
            best_ckpt = Checkpoint.from_model(model, epoch, cfg_dict,
                                              budget=asdict(budget) if budget else None)
        opt.lr = sched.step(monitored)
        if stopper.step(monitored):
            history.stopped_early = True
            break

    return best_ckpt, history


def config_fingerprint(config: TrainConfig) -> str:
    return fingerprint(asdict(config))

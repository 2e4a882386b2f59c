"""Effective pruning, the magnitude-pruning baseline and sparsity reports."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .reparam import h as stopband
from .tensor import no_grad

REPORT_KEYS = (
    "method",
    "target_rate",
    "c_initial",
    "surrogate_cost_fraction",
    "exact_nonzero_fraction",
    "accuracy_before_effective_prune",
    "accuracy_after_effective_prune",
)


@dataclass
class PruneReport:
    target_rate: float
    c_initial: int
    surrogate_cost_fraction: float
    exact_nonzero_fraction: float
    accuracy_before_effective_prune: float | None = None
    accuracy_after_effective_prune: float | None = None
    method: str = "none"
    layer_fractions: dict = field(default_factory=dict)
    layer_surrogate_fractions: dict = field(default_factory=dict)

    def to_text(self) -> str:
        """Flat ``name=value`` lines; per-layer values use ``layer.<name>.<metric>`` keys."""
        lines = []
        for key in REPORT_KEYS:
            value = getattr(self, key)
            lines.append(f"{key}={'' if value is None else _fmt(value)}")
        for name, frac in self.layer_fractions.items():
            lines.append(f"layer.{name}.nonzero_fraction={_fmt(frac)}")
        for name, frac in self.layer_surrogate_fractions.items():
            lines.append(f"layer.{name}.surrogate_fraction={_fmt(frac)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PruneReport":
        values: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"malformed report line {line!r}")
            values[key.strip()] = value.strip()
        missing = [k for k in REPORT_KEYS if k not in values]
        if missing:
            raise UsageError(f"report is missing {missing}")

        def opt(key):
            return float(values[key]) if values[key] else None

        layers: OrderedDict[str, float] = OrderedDict()
        surrogates: OrderedDict[str, float] = OrderedDict()
        for key, value in values.items():
            if key.startswith("layer."):
                name, _, metric = key[len("layer."):].rpartition(".")
                target = layers if metric == "nonzero_fraction" else surrogates
                target[name] = float(value)
        return cls(
            target_rate=float(values["target_rate"]),
            c_initial=int(values["c_initial"]),
            surrogate_cost_fraction=float(values["surrogate_cost_fraction"]),
            exact_nonzero_fraction=float(values["exact_nonzero_fraction"]),
            accuracy_before_effective_prune=opt("accuracy_before_effective_prune"),
            accuracy_after_effective_prune=opt("accuracy_after_effective_prune"),
            method=values["method"],
            layer_fractions=dict(layers),
            layer_surrogate_fractions=dict(surrogates),
        )


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def prune_count(p: float, c_initial: int) -> int:
    """``floor(p * c_initial)``, robust to ``p`` not being exactly representable."""
    return int(math.floor(p * c_initial + 1e-9))


def _ranking(model, key: str) -> tuple[np.ndarray, list]:
    layers = model.reparam_layers()
    scores = []
    for layer in layers:
        w = layer.weight.data.astype(np.float64).reshape(-1)
        if key == "apparent":
            scores.append(np.abs(w * stopband(w, layer.temperature.value, layer.n)))
        else:
            scores.append(np.abs(w))
    flat = np.concatenate(scores) if scores else np.zeros(0)
    # stable sort: ties keep flat parameter order
    return np.argsort(flat, kind="stable"), layers


def _zero_smallest(model, p: float, key: str, set_mask: bool):
    if not 0.0 <= p < 1.0:
        raise UsageError(f"pruning rate must lie in [0, 1), got {p}")
    order, layers = _ranking(model, key)
    k = prune_count(p, order.size)
    kill = np.zeros(order.size, dtype=bool)
    kill[order[:k]] = True
    offset = 0
    for layer in layers:
        size = layer.weight.size
        keep = ~kill[offset:offset + size].reshape(layer.weight.shape)
        offset += size
        layer.weight.data = np.where(keep, layer.weight.data, 0).astype(layer.weight.dtype)
        if set_mask:
            mask = keep.astype(layer.weight.dtype)
            layer.mask = mask if layer.mask is None else layer.mask * mask
    return model


def effective_prune(model, p: float, inplace: bool = False):
    """Zero the ``floor(p * C_initial)`` weights with smallest ``|w * h_t(w)|``.

    The ranking is global over all reparametrized layers. Temperatures are not
    touched. Returns a pruned copy unless ``inplace``.
    """
    target = model if inplace else model.copy()
    if p == 0:
        return target
    return _zero_smallest(target, p, "apparent", set_mask=False)


def magnitude_prune(model, p: float, inplace: bool = False):
    """Global magnitude pruning of a plainly trained model.

    Zeros the smallest-``|w|`` fraction ``p`` and stores a binary mask on each
    layer so that fine-tuning keeps the pruned entries at zero.
    """
    if model.mode != "plain":
        raise UsageError("magnitude pruning expects a model trained in plain mode")
    target = model if inplace else model.copy()
    if p == 0:
        return target
    return _zero_smallest(target, p, "magnitude", set_mask=True)


def accuracy(model, dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in percent, computed in eval mode."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size].astype(model.dtype, copy=False)
            logits = model.forward(x).data
            correct += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    model.training = was_training
    return 100.0 * correct / len(dataset)


def sparsity_fractions(model) -> dict:
    """Surrogate (``sum h / C_initial``) and exact nonzero fractions, global and per layer."""
    c_initial = model.count_prunable()
    named = model.named_reparam_layers()
    layer_nz: OrderedDict[str, float] = OrderedDict()
    layer_sur: OrderedDict[str, float] = OrderedDict()
    total_nz = 0
    total_sur = 0.0
    for name, layer in named.items():
        w = layer.weight.data.astype(np.float64)
        nz = int(np.count_nonzero(w))
        sur = float(np.sum(stopband(w, layer.temperature.value, layer.n)))
        layer_nz[name] = nz / w.size
        layer_sur[name] = sur / w.size
        total_nz += nz
        total_sur += sur
    denom = max(c_initial, 1)
    return dict(
        c_initial=c_initial,
        surrogate=total_sur / denom,
        nonzero=total_nz / denom,
        layer_nonzero=dict(layer_nz),
        layer_surrogate=dict(layer_sur),
    )


def measure(model, test_set, target_rate: float = 0.0, before=None, method: str = "none") -> PruneReport:
    """Report sparsity and accuracy of ``model``.

    Without ``before`` the model is treated as unpruned and its accuracy is the
    "before effective pruning" value. With ``before`` (the model prior to
    pruning), the surrogate fraction is that of ``before`` (the trained
    network's cost) while the exact nonzero fraction and the "after" accuracy
    come from ``model``.
    """
    acc = accuracy(model, test_set)
    fr = sparsity_fractions(model)
    if before is None:
        return PruneReport(target_rate, fr["c_initial"], fr["surrogate"], fr["nonzero"],
                           accuracy_before_effective_prune=acc, method=method,
                           layer_fractions=fr["layer_nonzero"],
                           layer_surrogate_fractions=fr["layer_surrogate"])
    fb = sparsity_fractions(before)
    return PruneReport(target_rate, fr["c_initial"], fb["surrogate"], fr["nonzero"],
                       accuracy_before_effective_prune=accuracy(before, test_set),
                       accuracy_after_effective_prune=acc, method=method,
                       layer_fractions=fr["layer_nonzero"],
                       layer_surrogate_fractions=fb["layer_surrogate"])

"""Differentiable parameter budget: surrogate l0 cost, budget loss, mixed objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from . import tensor as T
from .errors import UsageError
from .reparam import stopband_mask
from .tensor import Tensor


@dataclass(frozen=True)
class BudgetSpec:
    """Target for the surrogate cost.

    ``prune_rate`` is the fraction of prunable weights to remove, so the target
    cost is ``(1 - prune_rate) * c_initial``.
    """

    c_initial: float
    prune_rate: float
    lam: float = 5.0

    def __post_init__(self):
        if not self.c_initial > 0:
            raise UsageError(f"c_initial must be positive, got {self.c_initial}")
        if not 0.0 <= self.prune_rate < 1.0:
            raise UsageError(f"prune_rate must lie in [0, 1), got {self.prune_rate}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise UsageError(f"lambda must be a nonnegative finite number, got {self.lam}")

    @property
    def c_target(self) -> float:
        return (1.0 - self.prune_rate) * self.c_initial


def surrogate_cost(layers: Iterable) -> Tensor:
    """Sum of ``h_t(w)`` over every element of every reparametrized weight.

    ``layers`` yields objects with ``weight``, ``temperature`` and ``n``
    attributes (see :class:`budgetprune.models.ReparamLayer`).
    """
    terms = [T.sum(stopband_mask(l.weight, l.temperature, l.n)) for l in layers]
    if not terms:
        return Tensor(0.0)
    return T.stack_sum(terms) if len(terms) > 1 else terms[0]


def budget_loss(cost, spec: BudgetSpec) -> Tensor:
    """``((C - C_target) / C_initial) ** 2``."""
    cost = T.as_tensor(cost)
    gap = T.mul(T.sub(cost, spec.c_target), 1.0 / spec.c_initial)
    return T.square(gap)


def total_loss(task, budget, lam: float) -> Tensor:
    """``task + lam * budget``; with ``lam == 0`` the task loss node is returned as is."""
    task = T.as_tensor(task)
    if lam == 0:
        return task
    return T.add(task, T.mul(T.as_tensor(budget), float(lam)))

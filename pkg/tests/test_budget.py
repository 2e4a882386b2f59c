import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetprune import tensor as T
from budgetprune.budget import BudgetSpec, budget_loss, surrogate_cost, total_loss
from budgetprune.errors import UsageError
from budgetprune.reparam import Temperature
from budgetprune.tensor import Tensor

# 4 * mpmath h(1; t=1, n=4)
FOUR_H1 = 1.510162675192581741444397737017966084987


class Toy:
    def __init__(self, w, t=1.0, n=4):
        self.weight = Tensor(np.asarray(w, dtype=float), requires_grad=True)
        self.temperature = Temperature(t)
        self.n = n

    @property
    def tau(self):
        return self.temperature.tau


def test_spec_validation_and_target():
    spec = BudgetSpec(1000, 0.9)
    assert spec.lam == 5.0
    assert math.isclose(spec.c_target, 100.0)
    for bad in [dict(c_initial=0, prune_rate=0.5), dict(c_initial=10, prune_rate=1.0),
                dict(c_initial=10, prune_rate=-0.1), dict(c_initial=10, prune_rate=0.5, lam=-1)]:
        with pytest.raises(UsageError):
            BudgetSpec(**bad)


def test_surrogate_cost_values():
    assert float(surrogate_cost([Toy(np.zeros(7))]).data) == 0.0
    assert float(surrogate_cost([Toy(np.full(9, 1e6))]).data) == 9.0
    c = float(surrogate_cost([Toy([1.0, 1.0, 1.0, 1.0])]).data)
    assert abs(c - FOUR_H1) < 1e-12
    assert abs(c - 1.510164) < 2e-6


def test_surrogate_cost_grads_flow_to_weights_and_tau():
    layers = [Toy(np.random.default_rng(0).uniform(-1, 1, 10)), Toy([0.5, -0.2], t=3.0)]
    surrogate_cost(layers).backward()
    for l in layers:
        assert l.weight.grad is not None and np.any(l.weight.grad != 0)
        assert l.tau.grad is not None and float(l.tau.grad) > 0


def test_budget_loss_values_and_grad():
    spec = BudgetSpec(1000, 0.9)
    assert float(budget_loss(spec.c_target, spec).data) == 0.0
    assert math.isclose(float(budget_loss(1000.0, spec).data), 0.81, rel_tol=1e-14)
    c = Tensor(437.0, requires_grad=True)
    budget_loss(c, spec).backward()
    analytic = 2 * (437.0 - 100.0) / 1000.0 ** 2
    eps = 1e-6
    fd = (float(budget_loss(437.0 + eps, spec).data) - float(budget_loss(437.0 - eps, spec).data)) / (2 * eps)
    assert abs(float(c.grad) - analytic) <= 1e-14
    assert abs(fd - analytic) / analytic <= 1e-8


def test_total_loss():
    assert total_loss(Tensor(2.0), Tensor(0.81), 0.0).item() == 2.0
    assert math.isclose(total_loss(Tensor(2.0), Tensor(0.81), 5.0).item(), 6.05, rel_tol=1e-15)


def test_total_loss_gradient_from_both_terms():
    rng = np.random.default_rng(1)
    layer = Toy(rng.uniform(-1, 1, (3, 4)), t=2.0)
    x = rng.standard_normal((5, 4))
    y = np.array([0, 1, 2, 0, 1])
    spec = BudgetSpec(12, 0.5)

    def grads(lam):
        layer.weight.grad = None
        from budgetprune.reparam import apparent_weights
        logits = T.linear(Tensor(x), apparent_weights(layer.weight, layer.temperature, 4))
        task = T.softmax_cross_entropy(logits, y)
        total_loss(task, budget_loss(surrogate_cost([layer]), spec), lam).backward()
        return layer.weight.grad.copy()

    g0, g5 = grads(0.0), grads(5.0)
    assert np.any(g0 != 0)
    assert np.any(np.abs(g5 - g0) > 1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=2, max_size=30), st.floats(1.01, 1.5))
def test_cost_monotone_under_magnitude_growth(ws, factor):
    w = np.array(ws)
    a = float(surrogate_cost([Toy(w)]).data)
    b = float(surrogate_cost([Toy(w * factor)]).data)
    assert b >= a


def test_budget_loss_depends_only_on_total():
    spec = BudgetSpec(20, 0.5)
    w = np.linspace(-2, 2, 20)
    a = budget_loss(surrogate_cost([Toy(w)]), spec).item()
    b = budget_loss(surrogate_cost([Toy(w[::-1].copy())]), spec).item()
    # equal up to summation order
    assert a == pytest.approx(b, rel=1e-12)


def test_fixed_point_has_zero_gradient():
    layer = Toy(np.random.default_rng(2).uniform(-1, 1, 50), t=1.5)
    c = surrogate_cost([layer]).item()
    spec = BudgetSpec(50, 1.0 - c / 50.0)
    loss = budget_loss(surrogate_cost([layer]), spec)
    loss.backward()
    assert loss.item() <= 1e-30
    assert np.max(np.abs(layer.weight.grad)) <= 1e-15
    assert abs(float(layer.tau.grad)) <= 1e-15


def test_fixed_point_total_loss_gradient_is_task_only():
    layer = Toy(np.random.default_rng(3).uniform(-1, 1, 30), t=2.0)
    spec = BudgetSpec(30, 1.0 - surrogate_cost([layer]).item() / 30.0)
    x = Tensor(np.random.default_rng(4).normal(size=30))

    def grads(with_budget):
        layer.weight.grad = None
        layer.tau.grad = None
        task = T.sum(T.mul(x, layer.weight))
        loss = task
        if with_budget:
            loss = total_loss(task, budget_loss(surrogate_cost([layer]), spec), 5.0)
        loss.backward()
        return layer.weight.grad.copy(), 0.0 if layer.tau.grad is None else float(layer.tau.grad)

    gw_task, gt_task = grads(False)
    gw_all, gt_all = grads(True)
    assert np.max(np.abs(gw_all - gw_task)) <= 1e-15
    assert abs(gt_all - gt_task) <= 1e-15


def test_budget_only_descent_reaches_target():
    from budgetprune.trainer import SGD

    layer = Toy(np.random.default_rng(0).normal(0, 0.1, 1000), t=100.0)
    spec = BudgetSpec(1000, 0.9)
    opt = SGD([layer.weight], [], 0.1, 0.9, 0.0, None, [layer.tau])
    for _ in range(200):
        layer.weight.grad = layer.tau.grad = None
        budget_loss(surrogate_cost([layer]), spec).backward()
        opt.step()
    gap = abs(surrogate_cost([layer]).item() - spec.c_target) / spec.c_initial
    assert gap <= 0.01

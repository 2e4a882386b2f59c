"""Stopband reparametrization of weights.

A weight ``w`` is used by the network through its apparent value
``w * h_t(w)`` where ``h_t`` is a smooth, even, [0, 1]-valued gate that is
close to 0 for ``|w| << 1/t`` and close to 1 for ``|w| >> 1/t``. The
temperature ``t`` is stored as ``tau = log t`` so that gradient steps can never
make it non-positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import UsageError
from .tensor import Tensor, _make

C1 = kernels.C1
C2 = kernels.C2
SATURATION = kernels.SATURATION


@dataclass(frozen=True)
class ReparamConfig:
    n: int = 4
    t_init: float = 100.0

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 2 or self.n % 2:
            raise UsageError(f"crispness n must be an even integer >= 2, got {self.n!r}")
        if not (self.t_init > 0 and math.isfinite(self.t_init)):
            raise UsageError(f"t_init must be positive and finite, got {self.t_init!r}")

    @property
    def c1(self) -> float:
        return C1

    @property
    def c2(self) -> float:
        return C2


class Temperature:
    """Learnable per-layer temperature, ``t = exp(tau)``."""

    def __init__(self, t_init: float = 100.0, name: str = "tau"):
        if t_init <= 0:
            raise UsageError(f"temperature must be positive, got {t_init}")
        self.tau = Tensor(np.array(math.log(t_init)), requires_grad=True, name=name)

    @property
    def value(self) -> float:
        return math.exp(float(self.tau.data))

    def __repr__(self) -> str:
        return f"Temperature(t={self.value:.6g})"


def _check(t: float, n: int) -> None:
    if not t > 0:
        raise UsageError(f"temperature must be positive, got {t}")
    if n < 2 or n % 2:
        raise UsageError(f"n must be an even integer >= 2, got {n}")


def h_unstable(x, t: float, n: int):
    """The naive gate ``exp(-1 / (t x)^n)``.

    Kept to show why it is not used: at ``x = 0`` it evaluates ``1/0`` and
    yields a non-finite intermediate (and a NaN gradient). No error is raised.
    """
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.exp(-1.0 / (t * x) ** n)


def h_unstable_grad(x, t: float, n: int):
    """d/dx of :func:`h_unstable`; NaN at ``x = 0``."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p = (t * x) ** n
        return np.exp(-1.0 / p) * n / (p * x)


def h(x, t: float, n: int):
    """Stabilized gate ``C1 * (exp(-1 / ((t x)^n + 1)) - C2)``, in [0, 1]."""
    _check(t, n)
    out, _, _ = kernels.stopband(np.asarray(x, dtype=np.float64), t, n)
    return out if np.ndim(x) else float(out)


def h_grad(x, t: float, n: int):
    """Return ``(dh/dx, dh/dt)``; both are exactly zero at ``x = 0`` and when saturated."""
    _check(t, n)
    _, dx, dlogt = kernels.stopband(np.asarray(x, dtype=np.float64), t, n, need_grad=True)
    dt = dlogt / t
    if np.ndim(x):
        return dx, dt
    return float(dx), float(dt)


def _resolve_temperature(temperature) -> tuple[float, Tensor | None]:
    if isinstance(temperature, Temperature):
        temperature = temperature.tau
    if isinstance(temperature, Tensor):
        return math.exp(float(temperature.data)), temperature
    t = float(temperature)
    if not t > 0:
        raise UsageError(f"temperature must be positive, got {t}")
    return t, None


def stopband_mask(w: Tensor, temperature, n: int) -> Tensor:
    """Graph node for ``h_t(w)``, differentiable w.r.t. ``w`` and ``tau``."""
    t, tau = _resolve_temperature(temperature)
    _check(t, n)
    hv, dx, dlogt = kernels.stopband(w.data, t, n, need_grad=True)

    def back(g):
        g = g.astype(np.float64, copy=False)
        gw = (g * dx).astype(w.dtype, copy=False)
        if tau is None:
            return (gw,)
        return gw, np.asarray(np.sum(g * dlogt), dtype=tau.dtype)

    parents = (w,) if tau is None else (w, tau)
    return _make(hv.astype(w.dtype, copy=False), parents, back)


def apparent_weights(w: Tensor, temperature, n: int) -> Tensor:
    """Graph node for ``w * h_t(w)``.

    ``temperature`` is a :class:`Temperature`, a ``tau`` tensor (``t = exp(tau)``)
    or a positive float (then no temperature gradient is produced).
    """
    t, tau = _resolve_temperature(temperature)
    _check(t, n)
    wd = w.data.astype(np.float64, copy=False)
    hv, dx, dlogt = kernels.stopband(wd, t, n, need_grad=True)
    out = wd * hv

    def back(g):
        g = g.astype(np.float64, copy=False)
        gw = (g * (hv + wd * dx)).astype(w.dtype, copy=False)
        if tau is None:
            return (gw,)
        return gw, np.asarray(np.sum(g * wd * dlogt), dtype=tau.dtype)

    parents = (w,) if tau is None else (w, tau)
    return _make(out.astype(w.dtype, copy=False), parents, back)


def suppressing_temperature(a: float, eps: float, n: int, grid: int = 2001,
                            t_hi: float = 1.0, iters: int = 200) -> float:
    """Bisect for the largest ``t`` with ``h_t(x) <= eps`` on ``[-a, a]``.

    Since ``h`` is increasing in ``|x|`` and in ``t``, the binding point is
    ``|x| = a``; the dense grid check guards that assumption.
    """
    xs = np.linspace(-a, a, grid)
    lo = 0.0
    hi = t_hi
    while np.max(h(xs, hi, n)) <= eps:
        lo, hi = hi, hi * 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= 0:
            break
        if np.max(h(xs, mid, n)) <= eps:
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        # even tiny t fails: cannot happen since h_t -> 0 as t -> 0
        raise RuntimeError("no suppressing temperature found")
    return lo

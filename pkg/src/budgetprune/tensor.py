"""Small reverse-mode autodiff engine over dense numpy arrays.

Each op builds its output eagerly and records a closure mapping the upstream
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph in
reverse topological order; only leaf tensors that require gradients keep a
``.grad`` and those accumulate across calls until :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import InputError, NonFiniteError, ShapeError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    # graph ---------------------------------------------------------------

    def backward(self, check_finite: bool = True) -> None:
        """Backpropagate from this scalar into every leaf that requires grad."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if check_finite and not np.isfinite(self.data).all():
            raise NonFiniteError("loss is not finite")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    if check_finite and not np.isfinite(g).all():
                        raise NonFiniteError(f"non-finite gradient for {node!r}")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return _make(out, (x,), lambda g: (-g * out * out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def even_power(x: Tensor, n: int) -> Tensor:
    """``x**n`` for even ``n >= 2``, computed as ``(x*x)**(n/2)`` so it is exactly even."""
    if n < 2 or n % 2:
        raise UsageError(f"even_power needs an even n >= 2, got {n}")
    sq = x.data * x.data
    out = sq ** (n // 2)

    def back(g):
        return (g * n * x.data * sq ** (n // 2 - 1),)

    return _make(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, (x,), lambda g: (g.T,))


def stack_sum(xs: Iterable[Tensor]) -> Tensor:
    """Sum a sequence of same-shape tensors into one node."""
    xs = list(xs)
    out = xs[0].data.copy()
    for t in xs[1:]:
        out = out + t.data
    return _make(out, xs, lambda g: tuple(g for _ in xs))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out_features, in_features)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = matmul(x, transpose(w))
    return out if b is None else add(out, b)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``k`` (F, C, kh, kw)."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {k.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    N, C, H, W = x.shape
    F, Ck, kh, kw = k.shape
    if C != Ck:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    oh = kernels.conv_output_size(H, kh, stride, padding)
    ow = kernels.conv_output_size(W, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    kmat = k.data.reshape(F, -1)
    out = (kmat @ cols).reshape(F, N, oh, ow).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, F, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(F, -1)
        dk = (g2 @ cols.T).reshape(k.shape) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(kmat.T @ g2, x.shape, kh, kw, stride, padding)
        if b is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    parents = (x, k, b) if b is not None else (x, k)
    return _make(out, parents, back)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    if H < k or W < k:
        raise ShapeError(f"pool window {k} larger than input {H}x{W}")
    out, arg = kernels.maxpool(x.data, k)
    return _make(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, k, H, W),))


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization. Running buffers are updated in place when training."""
    if x.data.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    C = x.shape[1]
    if training:
        m = x.size // C
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
    out = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, C, 1, 1)
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(1, C, 1, 1)
        else:
            dx = dxhat * inv_std.reshape(1, C, 1, 1)
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integers")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sumez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sumez)
    rows = np.arange(B)
    loss = np.asarray(-logp[rows, labels].mean())

    def back(g):
        p = ez / sumez
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _make(loss, (logits,), back)

"""Architectures whose conv/linear weights go through the stopband reparametrization.

A :class:`Model` runs in one of two modes:

``reparam``
    every conv/linear layer uses its apparent weights ``w * h_t(w)``;
``plain``
    the gate is replaced by the constant 1, which is the primary network.

Biases and batchnorm affine parameters are ordinary parameters in both modes
and never count towards the prunable total.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .reparam import Temperature, apparent_weights
from .tensor import Tensor

MODEL_NAMES = ("mlp-toy", "conv4", "conv4-small", "vgg19", "resnet18")
MODES = ("reparam", "plain")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: dict = field(default_factory=dict)
    reparametrized: bool = False


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    num_classes: int
    input_shape: tuple


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    spec: LayerSpec

    def forward(self, x: Tensor, model: "Model") -> Tensor:
        raise NotImplementedError

    def params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def reparam_layers(self) -> Iterator["ReparamLayer"]:
        return iter(())


class ReparamLayer(Layer):
    """Owns a weight tensor, a per-layer temperature and an optional pruning mask."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None, t_init: float, n: int):
        self.weight = Tensor(weight, requires_grad=True, dtype=weight.dtype)
        self.bias = None if bias is None else Tensor(bias, requires_grad=True, dtype=bias.dtype)
        self.temperature = Temperature(t_init)
        self.n = n
        self.mask: np.ndarray | None = None

    @property
    def tau(self) -> Tensor:
        return self.temperature.tau

    def effective_weight(self, mode: str) -> Tensor:
        if mode == "plain":
            return self.weight
        return apparent_weights(self.weight, self.temperature.tau, self.n)

    def params(self, prefix):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias
        yield prefix + "tau", self.tau

    def buffers(self, prefix):
        if self.mask is not None:
            yield prefix + "mask", self.mask

    def reparam_layers(self):
        yield self


class Conv2d(ReparamLayer):
    def __init__(self, cin, cout, k, stride, padding, bias, rng, t_init, n, dtype):
        fan_in = cin * k * k
        w = _fan_in_uniform(rng, (cout, cin, k, k), fan_in, dtype)
        b = np.zeros(cout, dtype=dtype) if bias else None
        super().__init__(w, b, t_init, n)
        self.stride = stride
        self.padding = padding
        self.spec = LayerSpec("conv", dict(cin=cin, cout=cout, k=k, stride=stride,
                                           padding=padding, bias=bias), True)

    def forward(self, x, model):
        return T.conv2d(x, self.effective_weight(model.mode), self.bias, self.stride, self.padding)


class Linear(ReparamLayer):
    def __init__(self, fin, fout, rng, t_init, n, dtype):
        w = _fan_in_uniform(rng, (fout, fin), fin, dtype)
        super().__init__(w, np.zeros(fout, dtype=dtype), t_init, n)
        self.spec = LayerSpec("linear", dict(fin=fin, fout=fout), True)

    def forward(self, x, model):
        return T.linear(x, self.effective_weight(model.mode), self.bias)


class ReLU(Layer):
    spec = LayerSpec("relu")

    def forward(self, x, model):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, k=2):
        self.k = k
        self.spec = LayerSpec("maxpool", dict(k=k))

    def forward(self, x, model):
        return T.maxpool2d(x, self.k)


class Flatten(Layer):
    spec = LayerSpec("flatten")

    def forward(self, x, model):
        return T.flatten(x)


class GlobalAvgPool(Layer):
    spec = LayerSpec("avgpool")

    def forward(self, x, model):
        return T.global_avg_pool(x)


class BatchNorm2d(Layer):
    def __init__(self, c, dtype):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.spec = LayerSpec("batchnorm", dict(c=c))

    def forward(self, x, model):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, model.training)

    def params(self, prefix):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def buffers(self, prefix):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var


class BasicBlock(Layer):
    """Two 3x3 conv-bn stages with an identity or 1x1 projection shortcut."""

    def __init__(self, cin, cout, stride, rng, t_init, n, dtype):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, False, rng, t_init, n, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, False, rng, t_init, n, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        self.shortcut: list[Layer] = []
        if stride != 1 or cin != cout:
            self.shortcut = [Conv2d(cin, cout, 1, stride, 0, False, rng, t_init, n, dtype),
                             BatchNorm2d(cout, dtype)]
        self.spec = LayerSpec("residual-block", dict(cin=cin, cout=cout, stride=stride))

    def _children(self):
        named = [("conv1.", self.conv1), ("bn1.", self.bn1), ("conv2.", self.conv2), ("bn2.", self.bn2)]
        named += [(f"shortcut.{i}.", l) for i, l in enumerate(self.shortcut)]
        return named

    def forward(self, x, model):
        out = T.relu(self.bn1.forward(self.conv1.forward(x, model), model))
        out = self.bn2.forward(self.conv2.forward(out, model), model)
        skip = x
        for l in self.shortcut:
            skip = l.forward(skip, model)
        return T.relu(T.add(out, skip))

    def params(self, prefix):
        for name, child in self._children():
            yield from child.params(prefix + name)

    def buffers(self, prefix):
        for name, child in self._children():
            yield from child.buffers(prefix + name)

    def reparam_layers(self):
        for _, child in self._children():
            yield from child.reparam_layers()


def _fan_in_uniform(rng, shape, fan_in, dtype):
    # He-uniform bound for relu networks
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    def __init__(self, name, layers, num_classes, input_shape, n, t_init, seed, dtype):
        self.name = name
        self.layers: list[Layer] = layers
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.n = n
        self.t_init = t_init
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.mode = "reparam"
        self.training = True

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.name, tuple(l.spec for l in self.layers),
                         self.num_classes, self.input_shape)

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def set_mode(self, mode: str) -> "Model":
        if mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        return self

    def forward(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name} expects inputs of shape (N, *{self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, self)
        return x

    __call__ = forward

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, p in layer.params(f"layers.{i}."):
                out[name] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers(f"layers.{i}."):
                out[name] = b
        return out

    def reparam_layers(self) -> list[ReparamLayer]:
        return [r for layer in self.layers for r in layer.reparam_layers()]

    def named_reparam_layers(self) -> "OrderedDict[str, ReparamLayer]":
        params = self.named_parameters()
        by_id = {id(p): name for name, p in params.items()}
        return OrderedDict(
            (by_id[id(r.weight)][: -len("weight")].rstrip("."), r) for r in self.reparam_layers()
        )

    def count_prunable(self) -> int:
        return int(sum(r.weight.size for r in self.reparam_layers()))

    def temperatures(self) -> list[float]:
        return [r.temperature.value for r in self.reparam_layers()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """All parameters and buffers by name; masks appear only when set."""
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters().items():
            state[name] = p.data
        for name, b in self.named_buffers().items():
            state[name] = b
        return state

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise UsageError(f"missing parameter {name!r}")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for i, layer in enumerate(self.layers):
            _load_buffers(layer, f"layers.{i}.", state)
        known = set(params) | set(self.named_buffers())
        unknown = set(state) - known
        if unknown:
            raise UsageError(f"unexpected entries in state: {sorted(unknown)}")


def _load_buffers(layer, prefix, state):
    if isinstance(layer, ReparamLayer):
        key = prefix + "mask"
        layer.mask = np.asarray(state[key], dtype=layer.weight.dtype).copy() if key in state else None
    elif isinstance(layer, BatchNorm2d):
        layer.running_mean[...] = state[prefix + "running_mean"]
        layer.running_var[...] = state[prefix + "running_var"]
    elif isinstance(layer, BasicBlock):
        for name, child in layer._children():
            _load_buffers(child, prefix + name, state)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

DEFAULT_INPUT = {
    "mlp-toy": (784,),
    "conv4": (3, 32, 32),
    "conv4-small": (3, 32, 32),
    "vgg19": (3, 32, 32),
    "resnet18": (3, 32, 32),
}

VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
             512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def _conv_stack(widths, fc, cin, hw, num_classes, rng, t_init, n, dtype):
    layers: list[Layer] = []
    h, w = hw
    for item in widths:
        if item == "M":
            layers.append(MaxPool2d(2))
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeError("input too small for the number of pooling stages")
        else:
            layers += [Conv2d(cin, item, 3, 1, 1, True, rng, t_init, n, dtype), ReLU()]
            cin = item
    layers.append(Flatten())
    fin = cin * h * w
    for width in fc:
        layers += [Linear(fin, width, rng, t_init, n, dtype), ReLU()]
        fin = width
    layers.append(Linear(fin, num_classes, rng, t_init, n, dtype))
    return layers


def build(name: str, num_classes: int = 10, input_shape=None, seed: int = 0,
          t_init: float = 100.0, n: int = 4, dtype=np.float64) -> Model:
    """Construct an architecture with freshly initialized parameters.

    Initialization is He-uniform on conv/linear weights, zero biases, unit
    batchnorm scale, all drawn from ``numpy.random.default_rng(seed)`` in layer
    order; every temperature starts at ``t_init``.
    """
    if name not in MODEL_NAMES:
        raise UsageError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    input_shape = tuple(input_shape or DEFAULT_INPUT[name])
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    if name == "mlp-toy":
        fin = int(np.prod(input_shape))
        layers: list[Layer] = []
        if len(input_shape) > 1:
            layers.append(Flatten())
        layers += [Linear(fin, 64, rng, t_init, n, dtype), ReLU(),
                   Linear(64, num_classes, rng, t_init, n, dtype)]
    else:
        if len(input_shape) != 3:
            raise ShapeError(f"{name} expects a (C, H, W) input shape, got {input_shape}")
        cin, hh, ww = input_shape
        if name == "conv4":
            layers = _conv_stack([64, 64, "M", 128, 128, "M"], [256, 256], cin, (hh, ww),
                                 num_classes, rng, t_init, n, dtype)
        elif name == "conv4-small":
            layers = _conv_stack([32, 32, "M", 64, 64, "M"], [128, 128], cin, (hh, ww),
                                 num_classes, rng, t_init, n, dtype)
        elif name == "vgg19":
            layers = _vgg19(cin, (hh, ww), num_classes, rng, t_init, n, dtype)
        else:
            layers = _resnet18(cin, num_classes, rng, t_init, n, dtype)
    return Model(name, layers, num_classes, input_shape, n, t_init, seed, dtype)


def _vgg19(cin, hw, num_classes, rng, t_init, n, dtype):
    layers: list[Layer] = []
    h, w = hw
    for item in VGG19_CFG:
        if item == "M":
            layers.append(MaxPool2d(2))
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeError("vgg19 needs inputs of at least 32x32")
        else:
            layers += [Conv2d(cin, item, 3, 1, 1, False, rng, t_init, n, dtype),
                       BatchNorm2d(item, dtype), ReLU()]
            cin = item
    layers += [Flatten(), Linear(cin * h * w, num_classes, rng, t_init, n, dtype)]
    return layers


def _resnet18(cin, num_classes, rng, t_init, n, dtype):
    layers: list[Layer] = [Conv2d(cin, 64, 3, 1, 1, False, rng, t_init, n, dtype),
                           BatchNorm2d(64, dtype), ReLU()]
    width = 64
    for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        layers.append(BasicBlock(width, cout, stride, rng, t_init, n, dtype))
        layers.append(BasicBlock(cout, cout, 1, rng, t_init, n, dtype))
        width = cout
    layers += [GlobalAvgPool(), Linear(512, num_classes, rng, t_init, n, dtype)]
    return layers


def count_prunable(model: Model) -> int:
    return model.count_prunable()

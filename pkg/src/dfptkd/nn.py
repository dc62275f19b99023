"""Layers, parameter registry and initialization schemes."""

from __future__ import annotations

import math

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

GROUPS = ("theta", "phi", "psi")


class Parameter(Tensor):
    """A leaf tensor owned by a module; trainable unless frozen."""

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Minimal container: parameters, buffers and submodules in attribute order."""

    def __init__(self):
        self.training = True
        self._buffers: list[str] = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        if name not in self._buffers:
            self._buffers.append(name)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.named_modules(prefix):
            for b in mod._buffers:
                yield (f"{name}.{b}" if name else b), getattr(mod, b)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {n for n, _ in self.named_buffers()}
        expected = set(params) | buffers
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != value.shape:
                    raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in buffers:
                mod_name, _, attr = name.rpartition(".")
                mod = dict(self.named_modules())[mod_name]
                cur = getattr(mod, attr)
                if cur.shape != value.shape:
                    raise ShapeError(f"{name}: expected {cur.shape}, got {value.shape}")
                setattr(mod, attr, np.array(value, dtype=cur.dtype))

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = False, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1

    def param_count(self) -> int:
        n = self.out_channels * self.in_channels * self.kernel_size ** 2
        return n + (self.out_channels if self.bias is not None else 0)

    def forward(self, x: Tensor) -> Tensor:
        _trace(self, x.shape)
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Batch normalization; running stats follow r <- (1 - m) r + m * batch_stat."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def param_count(self) -> int:
        return 2 * self.channels

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2d({self.channels}) got input {x.shape}")
        if not self.training:
            out, _, _ = T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.eps)
            return out
        if x.shape[0] < 2:
            raise ValueError("BatchNorm2d in train mode needs a batch of at least 2")
        out, bmean, bvar = T.batch_norm(x, self.weight, self.bias, eps=self.eps)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = bvar * (m / (m - 1)) if m > 1 else bvar
        mom = self.momentum
        self.running_mean = ((1 - mom) * self.running_mean + mom * bmean).astype(self.running_mean.dtype)
        self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(self.running_var.dtype)
        return out


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
        return x.mean(axis=(2, 3))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def param_count(self) -> int:
        return self.in_features * self.out_features + (self.out_features if self.bias is not None else 0)

    def forward(self, x: Tensor) -> Tensor:
        _trace(self, x.shape)
        return linear(self.weight, self.bias, x)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool()(x)


def linear(weight: Tensor, bias: Tensor | None, x: Tensor) -> Tensor:
    """Affine map x W^T + b for a (batch, in) input."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = T.matmul(x, weight.T)
    return out + bias if bias is not None else out


# -- initialization ----------------------------------------------------------

def init(param: Tensor, scheme: str, rng: np.random.Generator | None = None,
         other: Tensor | None = None, gain: float = math.sqrt(2.0)) -> None:
    """Fill ``param`` in place according to ``scheme``.

    Schemes: kaiming_normal (fan-in std gain / sqrt(fan_in); default gain is
    the ReLU one, use 1 for a linear stack), zeros, ones, identity_1x1,
    copy_of (requires ``other`` of identical shape).
    """
    shape = param.shape
    if scheme == "kaiming_normal":
        if rng is None:
            raise ValueError("kaiming_normal needs a seeded rng")
        if len(shape) < 2:
            raise ShapeError(f"kaiming_normal needs a weight of rank >= 2, got {shape}")
        fan_in = int(np.prod(shape[1:]))
        param.data = rng.normal(0.0, gain / np.sqrt(fan_in), size=shape).astype(param.dtype)
    elif scheme == "zeros":
        param.data = np.zeros(shape, dtype=param.dtype)
    elif scheme == "ones":
        param.data = np.ones(shape, dtype=param.dtype)
    elif scheme == "identity_1x1":
        if len(shape) != 4 or shape[0] != shape[1] or shape[2:] != (1, 1):
            raise ShapeError(f"identity_1x1 needs a CxCx1x1 weight, got {shape}")
        param.data = np.eye(shape[0], dtype=param.dtype)[:, :, None, None].copy()
    elif scheme == "copy_of":
        if other is None or other.shape != shape:
            raise ShapeError(f"copy_of needs a source of shape {shape}")
        param.data = np.array(other.data, dtype=param.dtype, copy=True)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")


def init_module(module: Module, rng: np.random.Generator, gain: float = math.sqrt(2.0)) -> None:
    """Default initialization: kaiming convs/linears, unit BN scale, zero biases."""
    for _, m in module.named_modules():
        if isinstance(m, (Conv2d, Linear)):
            init(m.weight, "kaiming_normal", rng, gain=gain)
            if m.bias is not None:
                init(m.bias, "zeros")
        elif isinstance(m, BatchNorm2d):
            init(m.weight, "ones")
            init(m.bias, "zeros")


# -- registry ----------------------------------------------------------------

class ParamRegistry:
    """Ordered name -> tensor map where every entry carries a group label."""

    def __init__(self):
        self._entries: "OrderedDict[str, tuple[Parameter, str]]" = OrderedDict()

    def add(self, module: Module, prefix: str, group: str) -> None:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        seen = {id(p) for p, _ in self._entries.values()}
        for name, p in module.named_parameters(prefix):
            if name in self._entries:
                raise KeyError(f"duplicate parameter name {name}")
            if id(p) in seen:
                raise ValueError(f"{name} already registered under another name")
            self._entries[name] = (p, group)

    def group(self, label: str) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, (p, g) in self._entries.items() if g == label]

    def items(self):
        return [(n, p, g) for n, (p, g) in self._entries.items()]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def count(self, label: str | None = None) -> int:
        return sum(p.size for n, (p, g) in self._entries.items() if label is None or g == label)


# -- layer tracing for cost accounting --------------------------------------

_tracer: list | None = None


def _trace(layer: Module, in_shape: tuple[int, ...]) -> None:
    if _tracer is not None:
        _tracer.append((layer, in_shape))


class trace_layers:
    """Context manager recording (layer, input shape) for every conv/linear call."""

    def __enter__(self):
        global _tracer
        self._prev = _tracer
        _tracer = self.calls = []
        return self.calls

    def __exit__(self, *exc):
        global _tracer
        _tracer = self._prev
        return False

"""Staged CNN backbones (teacher/student zoo) and their checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_records, write_records, VERSION
from .nn import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU, Sequential,
                 init_module)
from .tensor import ShapeError, Tensor


class UnknownArchitectureError(KeyError):
    pass


class ArchMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    """Resolvable architecture description.

    ``family`` is one of ``cifar_resnet`` (stem + three residual layers),
    ``tiny_resnet`` (stem + one stride-2 residual stage per extra width) or
    ``tiny_vgg`` (plain conv stacks). ``blocks[i]`` is the number of blocks
    (or convs) in stage i; the stem is stage 0 and always has one conv.
    """

    name: str
    family: str
    widths: tuple[int, ...]
    blocks: tuple[int, ...]
    num_classes: int = 10
    in_channels: int = 3
    input_size: int = 16


_ZOO = {
    "tiny-resnet-T": ArchSpec("tiny-resnet-T", "tiny_resnet", (32, 64, 128), (1, 1, 1)),
    "tiny-resnet-S": ArchSpec("tiny-resnet-S", "tiny_resnet", (12, 24, 48), (1, 1, 1)),
    "tiny-vgg-T": ArchSpec("tiny-vgg-T", "tiny_vgg", (32, 64, 128), (1, 2, 2)),
    "tiny-vgg-S": ArchSpec("tiny-vgg-S", "tiny_vgg", (24, 48, 64), (1, 1, 1)),
    "resnet8x4": ArchSpec("resnet8x4", "cifar_resnet", (32, 64, 128, 256), (1, 1, 1, 1), 100, 3, 32),
    "resnet14x4": ArchSpec("resnet14x4", "cifar_resnet", (32, 64, 128, 256), (1, 2, 2, 2), 100, 3, 32),
    "resnet32x4": ArchSpec("resnet32x4", "cifar_resnet", (32, 64, 128, 256), (1, 5, 5, 5), 100, 3, 32),
}


def zoo_names() -> list[str]:
    return list(_ZOO)


def arch_spec(name: str, num_classes: int | None = None, input_size: int | None = None,
              in_channels: int | None = None) -> ArchSpec:
    try:
        spec = _ZOO[name]
    except KeyError:
        raise UnknownArchitectureError(f"unknown architecture {name!r}; known: {', '.join(_ZOO)}") from None
    changes = {}
    if num_classes is not None:
        changes["num_classes"] = num_classes
    if input_size is not None:
        changes["input_size"] = input_size
    if in_channels is not None:
        changes["in_channels"] = in_channels
    return replace(spec, **changes)


class BasicBlock(Module):
    def __init__(self, in_c: int, out_c: int, stride: int = 1, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = Conv2d(in_c, out_c, 3, stride, 1, dtype=dtype)
        self.bn1 = BatchNorm2d(out_c, dtype=dtype)
        self.conv2 = Conv2d(out_c, out_c, 3, 1, 1, dtype=dtype)
        self.bn2 = BatchNorm2d(out_c, dtype=dtype)
        if stride != 1 or in_c != out_c:
            self.shortcut = Sequential(Conv2d(in_c, out_c, 1, stride, 0, dtype=dtype), BatchNorm2d(out_c, dtype=dtype))
        else:
            self.shortcut = None

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        res = x if self.shortcut is None else self.shortcut(x)
        return T.relu(out + res)


def _conv_bn_relu(in_c, out_c, stride, dtype):
    return [Conv2d(in_c, out_c, 3, stride, 1, dtype=dtype), BatchNorm2d(out_c, dtype=dtype), ReLU()]


class Head(Module):
    """Global average pool followed by a linear classifier."""

    def __init__(self, in_features: int, num_classes: int, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.pool = GlobalAvgPool()
        self.fc = Linear(in_features, num_classes, dtype=dtype)

    def forward(self, x):
        return self.fc(self.pool(x))


class StagedModel(Module):
    """N-stage backbone plus classification head; T = H o B."""

    def __init__(self, spec: ArchSpec, stages: list[Module], head: Head, group: str = "theta"):
        super().__init__()
        if len(stages) < 2:
            raise ValueError("a staged model needs at least two stages")
        self.spec = spec
        self.stages = stages
        self.head = head
        self.group = group

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return self.spec.widths

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def forward_staged(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.spec.name} expects (N, {self.spec.in_channels}, H, W), got {x.shape}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats, self.head(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_staged(x)[1]


def _build_stages(spec: ArchSpec, dtype) -> list[Module]:
    w, b = spec.widths, spec.blocks
    if len(w) != len(b):
        raise ValueError(f"{spec.name}: widths and blocks differ in length")
    stages: list[Module] = [Sequential(*_conv_bn_relu(spec.in_channels, w[0], 1, dtype))]
    if spec.family == "cifar_resnet":
        strides = [1] + [2] * (len(w) - 2)
        for i in range(1, len(w)):
            layers = [BasicBlock(w[i - 1], w[i], strides[i - 1], dtype)]
            layers += [BasicBlock(w[i], w[i], 1, dtype) for _ in range(b[i] - 1)]
            stages.append(Sequential(*layers))
    elif spec.family == "tiny_resnet":
        for i in range(1, len(w)):
            layers = [BasicBlock(w[i - 1], w[i], 2, dtype)]
            layers += [BasicBlock(w[i], w[i], 1, dtype) for _ in range(b[i] - 1)]
            stages.append(Sequential(*layers))
    elif spec.family == "tiny_vgg":
        for i in range(1, len(w)):
            layers = _conv_bn_relu(w[i - 1], w[i], 2, dtype)
            for _ in range(b[i] - 1):
                layers += _conv_bn_relu(w[i], w[i], 1, dtype)
            stages.append(Sequential(*layers))
    else:
        raise UnknownArchitectureError(f"unknown family {spec.family!r}")
    return stages


def build(spec: ArchSpec | str, seed: int = 0, dtype=T.DEFAULT_DTYPE, group: str = "theta") -> StagedModel:
    """Construct and initialize a model; identical (spec, seed) give identical weights."""
    if isinstance(spec, str):
        spec = arch_spec(spec)
    model = StagedModel(spec, _build_stages(spec, dtype), Head(spec.widths[-1], spec.num_classes, dtype), group)
    init_module(model, np.random.default_rng(seed))
    return model


def forward_staged(model: StagedModel, x: Tensor) -> tuple[list[Tensor], Tensor]:
    return model.forward_staged(x)


def analytic_param_count(spec: ArchSpec | str) -> int:
    """Closed-form parameter count from the architecture description alone."""
    if isinstance(spec, str):
        spec = arch_spec(spec)
    w, b = spec.widths, spec.blocks

    def conv_bn(i, o, k=3):
        return k * k * i * o + 2 * o

    def block(i, o, stride):
        n = conv_bn(i, o) + conv_bn(o, o)
        if stride != 1 or i != o:
            n += conv_bn(i, o, 1)
        return n

    total = conv_bn(spec.in_channels, w[0])
    for i in range(1, len(w)):
        if spec.family == "cifar_resnet":
            stride = 1 if i == 1 else 2
            total += block(w[i - 1], w[i], stride) + (b[i] - 1) * block(w[i], w[i], 1)
        elif spec.family == "tiny_resnet":
            total += block(w[i - 1], w[i], 2) + (b[i] - 1) * block(w[i], w[i], 1)
        else:
            total += conv_bn(w[i - 1], w[i]) + (b[i] - 1) * conv_bn(w[i], w[i])
    return total + w[-1] * spec.num_classes + spec.num_classes


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    arch: str
    arrays: dict[str, np.ndarray]
    metrics: dict[str, float] = field(default_factory=dict)
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def _spec_meta(spec: ArchSpec) -> dict:
    return {"name": spec.name, "num_classes": spec.num_classes, "in_channels": spec.in_channels,
            "input_size": spec.input_size}


def save_checkpoint(model: StagedModel, path, metrics: dict | None = None, seed: int | None = None,
                    extra: dict | None = None) -> None:
    meta = {"kind": "model", "arch": _spec_meta(model.spec), "metrics": dict(metrics or {}),
            "seed": seed}
    if extra:
        meta["extra"] = extra
    write_records(path, meta, model.state_dict())


def read_checkpoint(path) -> Checkpoint:
    meta, arrays = read_records(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    return Checkpoint(VERSION, meta["arch"]["name"], dict(arrays), meta.get("metrics", {}),
                      meta.get("seed"), meta)


def load_checkpoint(path, arch: str | None = None, group: str = "theta") -> StagedModel:
    """Rebuild the recorded architecture and load its parameters and buffers."""
    ckpt = read_checkpoint(path)
    if arch is not None and arch != ckpt.arch:
        raise ArchMismatchError(f"{path}: checkpoint holds {ckpt.arch!r}, expected {arch!r}")
    am = ckpt.meta["arch"]
    spec = arch_spec(am["name"], am["num_classes"], am["input_size"], am["in_channels"])
    dtype = next(iter(ckpt.arrays.values())).dtype if ckpt.arrays else T.DEFAULT_DTYPE
    model = build(spec, 0, dtype=dtype, group=group)
    try:
        model.load_state_dict(ckpt.arrays)
    except (KeyError, ShapeError) as exc:
        raise ArchMismatchError(f"{path}: parameters do not fit {spec.name}: {exc}") from exc
    model.meta = ckpt.meta
    return model

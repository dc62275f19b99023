"""Prompt blocks, fusion blocks and the dual-forward path teacher.

The teacher runs twice per batch. The original path is the frozen pre-trained
network. The prompt path adds, after every stage i, a learned prompt and a
fusion conv::

    x~_i = F_i(x_i + P_i(x_i)),   x_{i+1} = A_{i+1}(x~_i)

and ends in its own classification head. With the up-projection of every
prompt block zeroed, identity fusions and a head copied from the teacher, the
two paths produce bit-identical logits at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_records, write_records
from .losses import SoftPrediction, soften
from .models import Head, StagedModel
from .nn import Conv2d, Module, ParamRegistry, init, init_module
from .tensor import ShapeError, Tensor


class PromptConfigError(ValueError):
    pass


def _reduced_channels(channels: int, r1: float) -> int:
    return math.ceil(channels / r1)


def _partial_channels(reduced: int, r2: float) -> int:
    return math.floor(r2 * reduced + 1e-9)


def _validate(channels: int, r1: float, r2: float, kernels: Sequence[int]) -> tuple[int, int]:
    if r1 < 1:
        raise PromptConfigError(f"down-sampling rate r1 must be >= 1, got {r1}")
    if not 0 < r2 <= 1:
        raise PromptConfigError(f"partial ratio r2 must be in (0, 1], got {r2}")
    if not kernels or any(k < 1 or k % 2 == 0 for k in kernels):
        raise PromptConfigError(f"kernel sizes must be odd and positive, got {list(kernels)}")
    d = _reduced_channels(channels, r1)
    p = _partial_channels(d, r2)
    if p < 1:
        raise PromptConfigError(f"r2={r2} leaves no channel to convolve out of {d} (C={channels}, r1={r1})")
    return d, p


def prompt_block_param_count(channels: int, r1: float, r2: float, kernels: Sequence[int] = (3, 5, 7)) -> int:
    """down (C*D) + partial convs (sum P^2 k^2) + point-wise convs (n*D^2) + up (D*C)."""
    d, p = _validate(channels, r1, r2, kernels)
    return 2 * channels * d + sum(p * p * k * k for k in kernels) + len(kernels) * d * d


def prompt_block_macs(channels: int, height: int, width: int, r1: float, r2: float,
                      kernels: Sequence[int] = (3, 5, 7)) -> int:
    # every conv in the block is stride 1 with same padding and no bias
    return height * width * prompt_block_param_count(channels, r1, r2, kernels)


class PartialConv(Module):
    """k x k conv over the first ``partial`` channels; the rest pass through."""

    def __init__(self, channels: int, partial: int, kernel: int, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.partial = partial
        self.conv = Conv2d(partial, partial, kernel, 1, kernel // 2, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.partial == self.channels:
            return self.conv(x)
        head = self.conv(x[:, :self.partial])
        return T.concat([head, x[:, self.partial:]], axis=1)


class PromptBlock(Module):
    """1x1 down -> [partial k_i -> 1x1 point-wise] for each kernel -> 1x1 up."""

    def __init__(self, channels: int, r1: float = 4, r2: float = 0.5, kernels: Sequence[int] = (3, 5, 7),
                 rng: np.random.Generator | None = None, activation: bool = False, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        d, p = _validate(channels, r1, r2, kernels)
        self.channels, self.reduced, self.partial = channels, d, p
        self.r1, self.r2, self.kernels = r1, r2, tuple(kernels)
        self.activation = activation
        self.down = Conv2d(channels, d, 1, dtype=dtype)
        self.partials = [PartialConv(d, p, k, dtype) for k in kernels]
        self.pointwise = [Conv2d(d, d, 1, dtype=dtype) for _ in kernels]
        self.up = Conv2d(d, channels, 1, dtype=dtype)
        # kaiming gain matches the nonlinearity: sqrt(2) for ReLU, 1 for a linear stack
        init_module(self, rng if rng is not None else np.random.default_rng(0),
                    gain=math.sqrt(2.0) if activation else 1.0)
        init(self.up.weight, "zeros")

    def param_count(self) -> int:
        return prompt_block_param_count(self.channels, self.r1, self.r2, self.kernels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"prompt block for {self.channels} channels got input {x.shape}")
        h = self.down(x)
        for pconv, pw in zip(self.partials, self.pointwise):
            h = pw(pconv(h))
            if self.activation:
                h = T.relu(h)
        return self.up(h)


def build_prompt_block(channels: int, r1: float = 4, r2: float = 0.5, kernels: Sequence[int] = (3, 5, 7),
                       seed: int = 0, dtype=T.DEFAULT_DTYPE) -> PromptBlock:
    return PromptBlock(channels, r1, r2, kernels, np.random.default_rng(seed), dtype=dtype)


def prompt_forward(block: PromptBlock, x: Tensor) -> Tensor:
    return block(x)


class FusionBlock(Module):
    """Stack of identity-initialized 1x1 convs applied to (feature + prompt)."""

    def __init__(self, channels: int, num_convs: int = 1, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.convs = [Conv2d(channels, channels, 1, dtype=dtype) for _ in range(num_convs)]
        for c in self.convs:
            init(c.weight, "identity_1x1")

    def forward(self, x: Tensor) -> Tensor:
        for c in self.convs:
            x = c(x)
        return x


def fuse(block: FusionBlock | None, x: Tensor, prompt: Tensor) -> Tensor:
    """x~ = F(x + prompt); ``block=None`` is the no-fusion ablation (plain sum)."""
    if x.shape != prompt.shape:
        raise ShapeError(f"feature {x.shape} and prompt {prompt.shape} differ")
    s = x + prompt
    return s if block is None else block(s)


@dataclass
class DualOutput:
    z_teacher: Tensor
    z_prompt: Tensor
    feats_teacher: list[Tensor] = field(default_factory=list)
    feats_prompt: list[Tensor] = field(default_factory=list)
    stage_inputs_prompt: list[Tensor] = field(default_factory=list)

    def p_teacher(self, tau: float) -> SoftPrediction:
        return soften(self.z_teacher.data, tau)

    def p_prompt(self, tau: float) -> SoftPrediction:
        return soften(self.z_prompt.data, tau)


@dataclass(frozen=True)
class PromptConfig:
    r1: tuple[float, ...] | float = 4
    r2: float = 0.5
    kernels: tuple[int, ...] = (3, 5, 7)
    fusion: bool = True
    fusion_convs: int = 1
    blocks_per_stage: int = 1
    positions: tuple[int, ...] | None = None
    head_init: str = "copy"
    activation: bool = False

    def rates(self, num_stages: int) -> tuple[float, ...]:
        if isinstance(self.r1, (int, float)):
            return (float(self.r1),) * num_stages
        if len(self.r1) != num_stages:
            raise PromptConfigError(f"r1 has {len(self.r1)} entries for {num_stages} stages")
        return tuple(float(r) for r in self.r1)

    def to_dict(self) -> dict:
        return {"r1": list(self.r1) if not isinstance(self.r1, (int, float)) else self.r1,
                "r2": self.r2, "kernels": list(self.kernels), "fusion": self.fusion,
                "fusion_convs": self.fusion_convs, "blocks_per_stage": self.blocks_per_stage,
                "positions": None if self.positions is None else list(self.positions),
                "head_init": self.head_init, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptConfig":
        d = dict(d)
        if isinstance(d.get("r1"), list):
            d["r1"] = tuple(d["r1"])
        d["kernels"] = tuple(d["kernels"])
        if d.get("positions") is not None:
            d["positions"] = tuple(d["positions"])
        return cls(**d)


class DualForwardTeacher(Module):
    """Frozen teacher (theta) plus prompt path additions (phi)."""

    def __init__(self, teacher: StagedModel, config: PromptConfig | None = None, seed: int = 0):
        super().__init__()
        config = config or PromptConfig()
        if config.head_init not in ("copy", "random"):
            raise PromptConfigError(f"head_init must be 'copy' or 'random', got {config.head_init!r}")
        n = teacher.num_stages
        rates = config.rates(n)
        positions = set(range(n)) if config.positions is None else set(config.positions)
        if not positions <= set(range(n)):
            raise PromptConfigError(f"prompt positions {sorted(positions)} outside 0..{n - 1}")
        dtype = teacher.head.fc.weight.dtype
        rng = np.random.default_rng(seed)

        self.config = config
        self.teacher = teacher
        teacher.requires_grad_(False)
        teacher.eval()
        self.prompts = []
        self.fusions = []
        for i, c in enumerate(teacher.stage_channels):
            if i in positions:
                blocks = [PromptBlock(c, rates[i], config.r2, config.kernels, rng, config.activation, dtype)
                          for _ in range(config.blocks_per_stage)]
                self.prompts.append(_BlockSum(blocks))
                self.fusions.append(FusionBlock(c, config.fusion_convs, dtype) if config.fusion else None)
            else:
                self.prompts.append(None)
                self.fusions.append(None)
        spec = teacher.spec
        self.head_phi = Head(spec.widths[-1], spec.num_classes, dtype)
        if config.head_init == "copy":
            init(self.head_phi.fc.weight, "copy_of", other=teacher.head.fc.weight)
            init(self.head_phi.fc.bias, "copy_of", other=teacher.head.fc.bias)
        else:
            init_module(self.head_phi, rng)

    # -- parameter groups ------------------------------------------------
    def phi_modules(self) -> list[tuple[str, Module]]:
        mods = []
        for i, p in enumerate(self.prompts):
            if p is not None:
                mods.append((f"prompts.{i}", p))
        for i, f in enumerate(self.fusions):
            if f is not None:
                mods.append((f"fusions.{i}", f))
        mods.append(("head_phi", self.head_phi))
        return mods

    def registry(self) -> ParamRegistry:
        reg = ParamRegistry()
        reg.add(self.teacher, "teacher", "theta")
        for name, mod in self.phi_modules():
            reg.add(mod, name, "phi")
        return reg

    def theta_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.teacher.parameters())

    def set_theta_trainable(self, flag: bool) -> None:
        """Unfreeze (or refreeze) the backbone stages; the original head stays frozen."""
        for stage in self.teacher.stages:
            stage.requires_grad_(flag)

    # -- forward ---------------------------------------------------------
    def prompt_stage(self, i: int, x: Tensor) -> Tensor:
        block = self.prompts[i]
        if block is None:
            return x
        return fuse(self.fusions[i], x, block(x))

    def forward(self, x: Tensor, grad_flow: str = "through") -> DualOutput:
        if grad_flow not in ("through", "detached"):
            raise ValueError(f"grad_flow must be 'through' or 'detached', got {grad_flow!r}")
        self.teacher.eval()
        with T.no_grad():
            feats_t, z_t = self.teacher.forward_staged(x)
        frozen = self.theta_frozen()
        feats_p, inputs_p = [], []
        h = x
        last = self.teacher.num_stages - 1
        for i, stage in enumerate(self.teacher.stages):
            inputs_p.append(h)
            xi = feats_t[0] if (i == 0 and frozen) else stage(h)
            xt = self.prompt_stage(i, xi)
            feats_p.append(xt)
            h = xt.detach() if (grad_flow == "detached" and i < last) else xt
        z_p = self.head_phi(h)
        return DualOutput(z_t, z_p, feats_t, feats_p, inputs_p)


class _BlockSum(Module):
    """Sum of the prompts of parallel blocks attached to one stage."""

    def __init__(self, blocks: list[PromptBlock]):
        super().__init__()
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        out = self.blocks[0](x)
        for b in self.blocks[1:]:
            out = out + b(x)
        return out


def dual_forward(teacher: DualForwardTeacher, x: Tensor, grad_flow: str = "through") -> DualOutput:
    return teacher(x, grad_flow)


def param_groups(teacher: DualForwardTeacher) -> tuple[list[tuple[str, Tensor]], list[tuple[str, Tensor]]]:
    reg = teacher.registry()
    return reg.group("theta"), reg.group("phi")


# -- persistence ------------------------------------------------------------

def save_prompt_path(dual: DualForwardTeacher, path, metrics: dict | None = None, seed: int | None = None,
                     include_theta: bool = False) -> None:
    """Write phi (under ``prompt.``) and optionally the tuned backbone (under ``theta.``)."""
    arrays = {}
    for name, mod in dual.phi_modules():
        for k, v in mod.state_dict().items():
            arrays[f"prompt.{name}.{k}"] = v
    if include_theta:
        for k, v in dual.teacher.state_dict().items():
            arrays[f"theta.{k}"] = v
    meta = {"kind": "prompt_path", "teacher_arch": dual.teacher.spec.name,
            "prompt_config": dual.config.to_dict(), "metrics": dict(metrics or {}), "seed": seed,
            "include_theta": include_theta}
    write_records(path, meta, arrays)


def load_prompt_path(path, teacher: StagedModel) -> DualForwardTeacher:
    meta, arrays = read_records(path)
    if meta.get("kind") != "prompt_path":
        raise CheckpointError(f"{path}: not a prompt-path checkpoint")
    if meta["teacher_arch"] != teacher.spec.name:
        raise CheckpointError(f"{path}: built for {meta['teacher_arch']!r}, teacher is {teacher.spec.name!r}")
    dual = DualForwardTeacher(teacher, PromptConfig.from_dict(meta["prompt_config"]))
    for name, mod in dual.phi_modules():
        pre = f"prompt.{name}."
        mod.load_state_dict({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})
    if meta.get("include_theta"):
        teacher.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("theta.")})
    return dual

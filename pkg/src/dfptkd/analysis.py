"""Parameter/MAC accounting, prediction similarity and teacher-student gap reports.

FLOPs are reported as multiply-accumulates (one MAC counted once). BatchNorm,
activations, pooling and additions are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .dfpt import DualForwardTeacher, PromptConfig, prompt_block_macs, prompt_block_param_count
from .losses import SoftPrediction, kl_divergence
from .models import ArchSpec, arch_spec
from .nn import Conv2d, Linear, Module, Parameter, trace_layers
from .tensor import ShapeError, Tensor

FLOPS_CONVENTION = "FLOPs = multiply-accumulates; BatchNorm, activations and pooling excluded"


# -- cost accounting -----------------------------------------------------------

@dataclass
class CostRow:
    name: str
    group: str
    component: str
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow]
    input_shape: tuple[int, ...]

    def _sum(self, attr: str, key: str, value: str | None) -> int:
        return sum(getattr(r, attr) for r in self.rows if value is None or getattr(r, key) == value)

    def params(self, group: str | None = None) -> int:
        return self._sum("params", "group", group)

    def macs(self, group: str | None = None) -> int:
        return self._sum("macs", "group", group)

    def component_params(self, component: str) -> int:
        return self._sum("params", "component", component)

    def component_macs(self, component: str) -> int:
        return self._sum("macs", "component", component)

    def groups(self) -> list[str]:
        return list(dict.fromkeys(r.group for r in self.rows))

    def components(self) -> list[str]:
        return list(dict.fromkeys(r.component for r in self.rows))

    def totals(self) -> dict[str, tuple[int, int]]:
        out = {g: (self.params(g), self.macs(g)) for g in self.groups()}
        out["total"] = (self.params(), self.macs())
        return out

    def to_text(self, per_layer: bool = False) -> str:
        lines = [f"# {FLOPS_CONVENTION}", f"# input shape {tuple(self.input_shape)}"]
        if per_layer:
            width = max([len(r.name) for r in self.rows] + [5])
            lines.append(f"{'layer':<{width}}  {'group':<5}  {'params':>12}  {'MACs':>14}")
            for r in self.rows:
                lines.append(f"{r.name:<{width}}  {r.group:<5}  {r.params:>12,}  {r.macs:>14,}")
            lines.append("")
        lines.append(f"{'component':<16}  {'params':>12}  {'MACs':>14}")
        for c in self.components():
            lines.append(f"{c:<16}  {self.component_params(c):>12,}  {self.component_macs(c):>14,}")
        for g in self.groups():
            lines.append(f"{'group ' + g:<16}  {self.params(g):>12,}  {self.macs(g):>14,}")
        lines.append(f"{'total':<16}  {self.params():>12,}  {self.macs():>14,}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "group", "component", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.group, r.component, r.params, r.macs])
        return buf.getvalue()


def layer_macs(layer: Module, in_shape: Sequence[int]) -> int:
    """MACs of one conv or linear call for a single sample."""
    if isinstance(layer, Conv2d):
        _, c, h, w = in_shape
        oh, ow = layer.output_size(h), layer.output_size(w)
        return oh * ow * layer.out_channels * layer.kernel_size ** 2 * c
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features
    raise TypeError(f"no MAC rule for {type(layer).__name__}")


def _component(name: str) -> str:
    head = name.split(".")[0]
    return {"prompts": "prompt", "fusions": "fusion", "head_phi": "head_phi"}.get(head, head)


def _groups(model) -> dict[str, str]:
    """Parameter name -> group label."""
    if isinstance(model, DualForwardTeacher):
        return {n: g for n, _, g in model.registry().items()}
    group = getattr(model, "group", "phi")
    return {n: group for n, _ in model.named_parameters()}


def count_costs(model: Module, input_shape: Sequence[int]) -> CostReport:
    """Per-layer parameters and MACs from one traced single-sample forward pass.

    ``input_shape`` is (C, H, W) or (N, C, H, W); MACs are always per sample.
    Layers called more than once (the shared backbone of a dual teacher) are
    counted once per call. Modules owning parameters but no MAC rule
    (BatchNorm) appear with zero MACs, so parameter totals match enumeration.
    """
    shape = tuple(input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    if len(shape) != 3:
        raise ShapeError(f"input shape must be (C, H, W), got {tuple(input_shape)}")
    dtype = next(iter(model.parameters())).dtype if model.parameters() else T.DEFAULT_DTYPE
    was_training = model.training
    model.eval()
    try:
        with T.no_grad(), trace_layers() as calls:
            model(Tensor(np.zeros((1,) + shape, dtype=dtype)))
    finally:
        model.train(was_training)
    macs: dict[int, int] = {}
    for layer, in_shape in calls:
        macs[id(layer)] = macs.get(id(layer), 0) + layer_macs(layer, in_shape)
    groups = _groups(model)
    rows = []
    default = getattr(model, "group", "phi")
    for name, mod in model.named_modules():
        own = [(k, v) for k, v in vars(mod).items() if isinstance(v, Parameter)]
        if not own and id(mod) not in macs:
            continue
        first = f"{name}.{own[0][0]}" if (own and name) else (own[0][0] if own else None)
        rows.append(CostRow(name or type(mod).__name__, groups.get(first, default), _component(name),
                            sum(v.size for _, v in own), macs.get(id(mod), 0)))
    return CostReport(rows, shape)


# -- closed-form prompt-path costs ---------------------------------------------

def stage_resolutions(spec: ArchSpec | str, input_size: int | None = None) -> list[int]:
    """Spatial side length at the output of each stage."""
    if isinstance(spec, str):
        spec = arch_spec(spec)
    size = spec.input_size if input_size is None else input_size
    out = [size]
    for i in range(1, len(spec.widths)):
        stride = 1 if (spec.family == "cifar_resnet" and i == 1) else 2
        size = (size - 1) // stride + 1
        out.append(size)
    return out


@dataclass
class PromptCost:
    prompt_params: int
    prompt_macs: int
    fusion_params: int
    fusion_macs: int
    per_stage: list[tuple[int, int, int]] = field(default_factory=list)  # (channels, side, prompt params)

    @property
    def params(self) -> int:
        return self.prompt_params + self.fusion_params

    @property
    def macs(self) -> int:
        return self.prompt_macs + self.fusion_macs


def prompt_costs(spec: ArchSpec | str, config: PromptConfig | None = None,
                 input_size: int | None = None) -> PromptCost:
    """Closed-form parameters and MACs of all prompt and fusion blocks of a teacher."""
    if isinstance(spec, str):
        spec = arch_spec(spec)
    config = config or PromptConfig()
    n = len(spec.widths)
    rates = config.rates(n)
    positions = range(n) if config.positions is None else config.positions
    pp = pm = fp = fm = 0
    per_stage = []
    for i, side in enumerate(stage_resolutions(spec, input_size)):
        if i not in positions:
            continue
        c = spec.widths[i]
        bp = config.blocks_per_stage * prompt_block_param_count(c, rates[i], config.r2, config.kernels)
        pp += bp
        pm += config.blocks_per_stage * prompt_block_macs(c, side, side, rates[i], config.r2, config.kernels)
        if config.fusion:
            fp += config.fusion_convs * c * c
            fm += config.fusion_convs * c * c * side * side
        per_stage.append((c, side, bp))
    return PromptCost(pp, pm, fp, fm, per_stage)


def flops_grid(spec: ArchSpec | str, r1_values: Sequence[float], r2_values: Sequence[float],
               kernels: Sequence[int] = (3, 5, 7), fusion: bool = True) -> dict[tuple[float, float], int]:
    """Total prompt-path MACs for every (uniform r1, r2) pair."""
    out = {}
    for r1 in r1_values:
        for r2 in r2_values:
            cfg = PromptConfig(r1=r1, r2=r2, kernels=tuple(kernels), fusion=fusion)
            out[(r1, r2)] = prompt_costs(spec, cfg).macs
    return out


# -- prediction similarity -----------------------------------------------------

def kl_similarity(p_a: SoftPrediction, p_b: SoftPrediction) -> float:
    """Mean KL(p_a || p_b) over the batch, without temperature compensation."""
    if p_a.num_classes != p_b.num_classes:
        raise ShapeError(f"class counts differ: {p_a.num_classes} vs {p_b.num_classes}")
    return float(np.mean(kl_divergence(p_a.log_p, p_b.log_p)))


def nontarget_mass(p: SoftPrediction, t) -> float:
    """1 - p[t]; batch mean when ``p`` holds several rows."""
    probs = p.p
    if probs.ndim == 1:
        t = int(t)
        if not 0 <= t < len(probs):
            raise IndexError(f"target {t} outside [0, {len(probs)})")
        return float(1.0 - probs[t])
    t = np.asarray(t, dtype=np.int64)
    if t.shape != (len(probs),) or t.min() < 0 or t.max() >= probs.shape[1]:
        raise IndexError("targets must be one valid index per row")
    return float(np.mean(1.0 - probs[np.arange(len(t)), t]))


# -- capacity-gap table --------------------------------------------------------

@dataclass
class GapRow:
    method: str
    teacher: float
    student: float

    @property
    def gap(self) -> float:
        return self.teacher - self.student


@dataclass
class GapReport:
    rows: list[GapRow]

    @property
    def mean_teacher(self) -> float:
        return float(np.mean([r.teacher for r in self.rows]))

    @property
    def mean_student(self) -> float:
        return float(np.mean([r.student for r in self.rows]))

    @property
    def mean_gap(self) -> float:
        return float(np.mean([r.gap for r in self.rows]))

    def to_text(self) -> str:
        width = max(len(r.method) for r in self.rows + [GapRow("average", 0, 0)])
        lines = [f"{'method':<{width}}  {'teacher':>8}  {'student':>8}  {'gap':>7}"]
        for r in self.rows:
            lines.append(f"{r.method:<{width}}  {r.teacher:>8.2f}  {r.student:>8.2f}  {r.gap:>7.2f}")
        lines.append(f"{'average':<{width}}  {self.mean_teacher:>8.2f}  {self.mean_student:>8.2f}  "
                     f"{self.mean_gap:>7.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "teacher", "student", "gap"])
        for r in self.rows:
            w.writerow([r.method, repr(r.teacher), repr(r.student), repr(r.gap)])
        w.writerow(["average", repr(self.mean_teacher), repr(self.mean_student), repr(self.mean_gap)])
        return buf.getvalue()


def gap_report(rows: Sequence[tuple[str, float, float]]) -> GapReport:
    if not rows:
        raise ValueError("gap report needs at least one row")
    return GapReport([GapRow(m, float(t), float(s)) for m, t, s in rows])

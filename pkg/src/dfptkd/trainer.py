"""Teacher pre-training, prompt-path optimization and student distillation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledDataset, batches
from .dfpt import DualForwardTeacher, PromptConfig, save_prompt_path
from .losses import cross_entropy, distillation_loss
from .models import StagedModel, arch_spec, build, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("ce-only", "vanilla-kd", "dfpt-kd", "dfpt-kd-dagger")
METHOD_ALIASES = {"ce": "ce-only", "kd": "vanilla-kd", "dfpt": "dfpt-kd", "dfpt-t": "dfpt-kd-dagger"}
CSV_COLUMNS = ("epoch", "split", "top1", "ce", "kd_t", "kd_p", "prompt_top1", "kl_s_t", "kl_s_p",
               "one_minus_pt_t", "one_minus_pt_p", "lr")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    method: str = "dfpt-kd"
    lam: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5
    tau: float = 4.0
    epochs: int = 240
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (150, 180, 210)
    lr_decay: float = 0.1
    teacher_lr_scale: float = 0.01
    seed: int = 0
    tau_compensation: bool = True
    grad_flow: str = "through"
    augment: bool = False
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.teacher_lr_scale <= 1:
            raise ValueError(f"teacher_lr_scale must be in (0, 1], got {self.teacher_lr_scale}")
        if self.grad_flow not in ("through", "detached"):
            raise ValueError(f"grad_flow must be 'through' or 'detached', got {self.grad_flow!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.milestones = tuple(int(m) for m in self.milestones)

    @property
    def uses_prompt_path(self) -> bool:
        return self.method in ("dfpt-kd", "dfpt-kd-dagger")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["prompt"] = self.prompt.to_dict()
        return d


# -- optimizer -----------------------------------------------------------------

@dataclass
class SGDState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr: float = 0.1
    step: int = 0
    buffers: dict = field(default_factory=dict)


def sgd_step(state: SGDState, params, grads, lr_scale: float = 1.0) -> None:
    """v <- mu v + g + wd p ; p <- p - lr v, in place."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    lr = state.lr * lr_scale
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        d = g + state.weight_decay * p.data if state.weight_decay else g
        buf = state.buffers.get(id(p))
        if buf is None or state.momentum == 0:
            buf = d.copy()
        else:
            buf = state.momentum * buf + d
        state.buffers[id(p)] = buf
        p.data = (p.data - lr * buf).astype(p.dtype)
    state.step += 1


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 lr_scale: float = 1.0):
        self.params = list(params)
        self.lr_scale = lr_scale
        self.state = SGDState(momentum, weight_decay, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.state.lr = lr
        sgd_step(self.state, self.params, [p.grad for p in self.params], self.lr_scale)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for the 0-based ``epoch``."""
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_decay ** passed


# -- metrics -------------------------------------------------------------------

class MetricsLog:
    """Append-only per-(epoch, split) records."""

    def __init__(self):
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        key = (record["epoch"], record["split"])
        if any((r["epoch"], r["split"]) == key for r in self.records):
            raise ValueError(f"duplicate record for epoch {key[0]}, split {key[1]!r}")
        self.records.append(dict(record))

    def rows(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]

    def last(self, split: str) -> dict:
        return self.rows(split)[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.records:
            cells = []
            for col in CSV_COLUMNS:
                v = r.get(col, float("nan"))
                cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {k: (row[k] if k == "split" else int(row[k]) if k == "epoch" else float(row[k]))
                       for k in row}
                out.append(rec)
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsLog) and self.csv_text() == other.csv_text()


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, values: dict, n: int) -> None:
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v) * n
        self.count += n

    def means(self) -> dict:
        return {k: v / self.count for k, v in self.sums.items()} if self.count else {}


# -- helpers ---------------------------------------------------------------------

def _check_finite(name: str, value: Tensor, context: dict) -> None:
    if not np.all(np.isfinite(value.data)):
        state = dict(context, loss=name, value=float(np.asarray(value.data).ravel()[0]))
        raise NonFiniteLossError(f"non-finite {name} loss at {context}", state)


def _kl_rows(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    return (np.exp(log_a) * (log_a - log_b)).sum(axis=1)


def _log_soft(z: np.ndarray, tau: float) -> np.ndarray:
    s = z.astype(np.float64) / tau
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _diagnostics(z_s, z_t, z_p, y, tau) -> dict:
    """Similarity metrics at temperature tau: KL(p_S||p_T), KL(p_S||p_P), 1 - p_t."""
    out = {"top1": float((z_s.argmax(1) == y).mean())}
    ls = _log_soft(z_s, tau)
    rows = np.arange(len(y))
    if z_t is not None:
        lt = _log_soft(z_t, tau)
        out["kl_s_t"] = float(_kl_rows(ls, lt).mean())
        out["one_minus_pt_t"] = float((1 - np.exp(lt[rows, y])).mean())
    if z_p is not None:
        lp = _log_soft(z_p, tau)
        out["kl_s_p"] = float(_kl_rows(ls, lp).mean())
        out["one_minus_pt_p"] = float((1 - np.exp(lp[rows, y])).mean())
        out["prompt_top1"] = float((z_p.argmax(1) == y).mean())
    return out


def evaluate(model: StagedModel, ds: LabeledDataset, batch_size: int = 250) -> float:
    model.eval()
    correct = 0
    with T.no_grad():
        for x, y in batches(ds, min(batch_size, len(ds)), 0, shuffle=False):
            z = model(Tensor(x.astype(model.head.fc.weight.dtype)))
            correct += int((z.data.argmax(1) == y).sum())
    return correct / len(ds)


# -- teacher pre-training --------------------------------------------------------

def pretrain_teacher(arch: str, train: LabeledDataset, test: LabeledDataset | None,
                     config: TrainConfig, path=None) -> tuple[StagedModel, MetricsLog]:
    """Cross-entropy training of a teacher; optionally saves a checkpoint at ``path``."""
    spec = arch_spec(arch, num_classes=train.num_classes, input_size=train.image_shape[1],
                     in_channels=train.image_shape[0])
    model = build(spec, config.seed)
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    mlog = MetricsLog()
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        model.train()
        meter = _Meter()
        for step, (x, y) in enumerate(batches(train, config.batch_size, config.seed, epoch, config.augment)):
            if len(y) < 2:
                continue
            z = model(Tensor(x))
            loss = cross_entropy(z, y)
            _check_finite("ce", loss, {"epoch": epoch + 1, "step": step})
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            meter.add({"ce": loss.item(), "top1": float((z.data.argmax(1) == y).mean())}, len(y))
        mlog.append(dict(meter.means(), epoch=epoch + 1, split="train", lr=lr))
        if test is not None:
            mlog.append({"epoch": epoch + 1, "split": "test", "top1": evaluate(model, test), "lr": lr})
        log.info("teacher epoch %d: %s", epoch + 1, mlog.records[-1])
    if path is not None:
        metrics = {"train_top1": evaluate(model, train)}
        if test is not None:
            metrics["test_top1"] = evaluate(model, test)
        save_checkpoint(model, path, metrics=metrics, seed=config.seed)
    return model, mlog


# -- distillation ----------------------------------------------------------------

@dataclass
class Optimizers:
    student: SGD
    prompt: SGD | None = None
    theta: SGD | None = None


def make_optimizers(config: TrainConfig, student: StagedModel,
                    dual: DualForwardTeacher | None) -> Optimizers:
    opts = Optimizers(SGD(student.parameters(), config.lr, config.momentum, config.weight_decay))
    if dual is not None and config.uses_prompt_path:
        phi = [p for _, mod in dual.phi_modules() for p in mod.parameters()]
        opts.prompt = SGD(phi, config.lr, config.momentum, config.weight_decay)
        if config.method == "dfpt-kd-dagger":
            dual.set_theta_trainable(True)
            theta = [p for stage in dual.teacher.stages for p in stage.parameters()]
            opts.theta = SGD(theta, config.lr, config.momentum, config.weight_decay,
                             lr_scale=config.teacher_lr_scale)
    return opts


def distill_step(config: TrainConfig, teacher, student: StagedModel, x: np.ndarray, y: np.ndarray,
                 opts: Optimizers, lr: float, context: dict | None = None) -> dict:
    """One training batch: forward all paths, update the prompt path, then the student.

    ``teacher`` is a DualForwardTeacher for the DFPT methods, a StagedModel for
    vanilla KD and may be None for CE-only training.
    """
    context = context or {}
    method = config.method
    if config.uses_prompt_path and not isinstance(teacher, DualForwardTeacher):
        raise TypeError(f"{method} needs a DualForwardTeacher")
    if method == "vanilla-kd" and isinstance(teacher, DualForwardTeacher):
        teacher = teacher.teacher
    if method == "vanilla-kd" and teacher is None:
        raise TypeError("vanilla-kd needs a teacher")
    tau, comp = config.tau, config.tau_compensation
    xs = Tensor(x)

    # (a) forward passes
    student.train()
    z_s = student(xs)
    z_t = z_p = None
    if config.uses_prompt_path:
        out = teacher(xs, config.grad_flow)
        z_t, z_p = out.z_teacher, out.z_prompt
    elif method == "vanilla-kd":
        teacher.eval()
        with T.no_grad():
            z_t = teacher(xs)
    stats = {}

    # (b) prompt path: lambda CE + (1 - lambda) (KD to p_T + KD to p_S), p_T and p_S fixed
    if config.uses_prompt_path:
        p_ce = cross_entropy(z_p, y)
        p_kd_t = distillation_loss(z_p, z_t.data, tau, comp)
        p_kd_s = distillation_loss(z_p, z_s.data, tau, comp)
        loss_p = config.lam * p_ce + (1 - config.lam) * (p_kd_t + p_kd_s)
        _check_finite("prompt", loss_p, context)
        opts.prompt.zero_grad()
        if opts.theta is not None:
            opts.theta.zero_grad()
        loss_p.backward()
        opts.prompt.step(lr)
        if opts.theta is not None:
            opts.theta.step(lr)
        stats.update(prompt_loss=loss_p.item(), prompt_ce=p_ce.item())

    # (c) student: alpha CE + beta (KD to p_T + KD to p_P), teacher outputs fixed
    ce = cross_entropy(z_s, y)
    loss_s = config.alpha * ce
    if z_t is not None:
        kd_t = distillation_loss(z_s, z_t.data, tau, comp)
        stats["kd_t"] = kd_t.item()
        kd_total = kd_t
        if z_p is not None:
            kd_p = distillation_loss(z_s, z_p.data, tau, comp)
            stats["kd_p"] = kd_p.item()
            kd_total = kd_total + kd_p
        loss_s = loss_s + config.beta * kd_total
    _check_finite("student", loss_s, context)
    opts.student.zero_grad()
    loss_s.backward()
    opts.student.step(lr)
    stats.update(ce=ce.item(), student_loss=loss_s.item())
    stats.update(_diagnostics(z_s.data, None if z_t is None else z_t.data,
                              None if z_p is None else z_p.data, y, tau))
    return stats


def evaluate_distill(config: TrainConfig, teacher, student: StagedModel, ds: LabeledDataset,
                     batch_size: int = 250) -> dict:
    """Test-split metrics: student top-1 and loss terms, prompt-path top-1, similarities."""
    student.eval()
    meter = _Meter()
    tau, comp = config.tau, config.tau_compensation
    with T.no_grad():
        for x, y in batches(ds, min(batch_size, len(ds)), 0, shuffle=False):
            xs = Tensor(x)
            z_s = student(xs)
            z_t = z_p = None
            if isinstance(teacher, DualForwardTeacher):
                out = teacher(xs)
                z_t = out.z_teacher
                z_p = out.z_prompt if config.uses_prompt_path else None
            elif teacher is not None:
                teacher.eval()
                z_t = teacher(xs)
            vals = {"ce": cross_entropy(z_s, y).item()}
            if z_t is not None:
                vals["kd_t"] = distillation_loss(z_s, z_t, tau, comp).item()
            if z_p is not None:
                vals["kd_p"] = distillation_loss(z_s, z_p, tau, comp).item()
            vals.update(_diagnostics(z_s.data, None if z_t is None else z_t.data,
                                     None if z_p is None else z_p.data, y, tau))
            meter.add(vals, len(y))
    return meter.means()


@dataclass
class RunResult:
    student: StagedModel
    teacher: object
    log: MetricsLog
    config: TrainConfig


def run(config: TrainConfig, teacher: StagedModel | None, student_arch: str, train: LabeledDataset,
        test: LabeledDataset | None = None, out_dir=None) -> RunResult:
    """Full distillation loop; ``teacher`` is mutated only by DFPT-KD-dagger."""
    spec = arch_spec(student_arch, num_classes=train.num_classes, input_size=train.image_shape[1],
                     in_channels=train.image_shape[0])
    student = build(spec, config.seed, group="psi")
    if config.method != "ce-only" and teacher is None:
        raise TypeError(f"{config.method} needs a teacher")
    if teacher is not None and teacher.spec.num_classes != train.num_classes:
        raise ValueError(f"teacher predicts {teacher.spec.num_classes} classes, data has {train.num_classes}")
    if config.uses_prompt_path:
        tmodel = DualForwardTeacher(teacher, config.prompt, seed=[config.seed, 1])
    elif config.method == "vanilla-kd":
        tmodel = teacher
    else:
        tmodel = None
    opts = make_optimizers(config, student, tmodel if isinstance(tmodel, DualForwardTeacher) else None)
    mlog = MetricsLog()
    try:
        for epoch in range(config.epochs):
            lr = lr_at(config, epoch)
            meter = _Meter()
            for step, (x, y) in enumerate(batches(train, config.batch_size, config.seed, epoch, config.augment)):
                if len(y) < 2:
                    continue
                stats = distill_step(config, tmodel, student, x, y, opts, lr,
                                     {"epoch": epoch + 1, "step": step})
                meter.add(stats, len(y))
            mlog.append(dict(meter.means(), epoch=epoch + 1, split="train", lr=lr))
            if test is not None:
                mlog.append(dict(evaluate_distill(config, tmodel, student, test), epoch=epoch + 1,
                                 split="test", lr=lr))
            log.info("%s epoch %d: %s", config.method, epoch + 1, mlog.records[-1])
    except NonFiniteLossError as exc:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            dump = dict(exc.state, config=config.to_dict())
            Path(out_dir, "nan_dump.json").write_text(json.dumps(dump, indent=2, default=str))
        raise
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        final = {"test_top1": mlog.last("test")["top1"]} if test is not None else {}
        save_checkpoint(student, out / "student.ckpt", metrics=final, seed=config.seed)
        if isinstance(tmodel, DualForwardTeacher):
            save_prompt_path(tmodel, out / "prompt.ckpt", seed=config.seed,
                             include_theta=config.method == "dfpt-kd-dagger")
        mlog.to_csv(out / "metrics.csv")
    return RunResult(student, tmodel, mlog, config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "prompt" in d and isinstance(d["prompt"], dict):
        d["prompt"] = PromptConfig.from_dict(d["prompt"])
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**d)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)

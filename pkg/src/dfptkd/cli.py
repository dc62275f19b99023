"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 input mismatch
(architecture, checkpoint or data format), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path


from .analysis import count_costs, gap_report, prompt_costs
from .checkpoint import CheckpointError
from .data import DataFormatError, LabeledDataset, SynthSpec, gen_synth, load_dataset, save_dataset
from .dfpt import DualForwardTeacher, PromptConfig, PromptConfigError
from .models import UnknownArchitectureError, arch_spec, build, load_checkpoint
from .trainer import (METHOD_ALIASES, MetricsLog, NonFiniteLossError, TrainConfig, evaluate,
                      pretrain_teacher, run)

log = logging.getLogger("dfptkd")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_RUNTIME = 0, 2, 3, 4
RUNS_ENV = "DFPT_RUNS"


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# -- run configuration file ------------------------------------------------------

_DATA_KEYS = {"source": "synth", "train": "", "test": "", "classes": "10", "per_class": "250",
              "size": "16", "channels": "3", "difficulty": "2.0", "seed": "0"}
_MODEL_KEYS = {"teacher": "tiny-resnet-T", "student": "tiny-resnet-S"}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "prompt"}
_PROMPT_FIELDS = {f.name: f for f in fields(PromptConfig)}


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(" ", "").split(",") if x)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _train_value(name: str, raw: str):
    default = getattr(TrainConfig(), name)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, tuple):
        return _ints(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _prompt_value(name: str, raw: str):
    if name == "r1":
        vals = _floats(raw)
        return vals[0] if len(vals) == 1 else vals
    if name == "r2":
        return float(raw)
    if name in ("kernels",):
        return _ints(raw)
    if name == "positions":
        return _ints(raw) if raw.strip() else None
    if name in ("fusion", "activation"):
        return _parse_bool(raw)
    if name in ("fusion_convs", "blocks_per_stage"):
        return int(raw)
    return raw.strip()


class RunConfig:
    """Sections [data], [model], [train], [prompt]; every key is validated."""

    def __init__(self, data: dict, model: dict, train: TrainConfig, base: Path):
        self.data, self.model, self.train, self.base = data, model, train, base

    @classmethod
    def read(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from exc
        return cls.from_parser(cp, path.parent)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, base: Path) -> "RunConfig":
        known = {"data": _DATA_KEYS, "model": _MODEL_KEYS, "train": _TRAIN_FIELDS, "prompt": _PROMPT_FIELDS}
        for section in cp.sections():
            if section not in known:
                raise UsageError(f"unknown config section [{section}]")
            unknown = set(cp[section]) - set(known[section])
            if unknown:
                raise UsageError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
        data = dict(_DATA_KEYS, **(dict(cp["data"]) if cp.has_section("data") else {}))
        model = dict(_MODEL_KEYS, **(dict(cp["model"]) if cp.has_section("model") else {}))
        try:
            tkw = {k: _train_value(k, v) for k, v in (cp["train"].items() if cp.has_section("train") else [])}
            pkw = {k: _prompt_value(k, v) for k, v in (cp["prompt"].items() if cp.has_section("prompt") else [])}
            train = TrainConfig(prompt=PromptConfig(**pkw), **tkw)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid config value: {exc}") from exc
        if data["source"] not in ("synth", "file"):
            raise UsageError(f"[data] source must be 'synth' or 'file', got {data['source']!r}")
        return cls(data, model, train, base)

    def resolved(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = dict(self.data)
        cp["model"] = dict(self.model)
        cp["train"] = {k: _format(getattr(self.train, k)) for k in _TRAIN_FIELDS}
        cp["prompt"] = {k: _format(getattr(self.train.prompt, k)) for k in _PROMPT_FIELDS}
        buf = []
        for section in cp.sections():
            buf.append(f"[{section}]")
            buf += [f"{k} = {v}" for k, v in cp[section].items()]
            buf.append("")
        return "\n".join(buf)

    def datasets(self) -> tuple[LabeledDataset, LabeledDataset, dict[str, str]]:
        """Train and test sets plus content hashes of their bytes."""
        d = self.data
        if d["source"] == "synth":
            try:
                spec = SynthSpec(int(d["classes"]), int(d["per_class"]), int(d["size"]), int(d["channels"]),
                                 float(d["difficulty"]), int(d["seed"]))
            except ValueError as exc:
                raise UsageError(f"invalid [data] value: {exc}") from exc
            train, test = gen_synth(spec)
            hashes = {f"synth:{ds.split}": blob_hash(ds.images.tobytes() + ds.labels.tobytes())
                      for ds in (train, test)}
            return train, test, hashes
        out = []
        hashes = {}
        for key in ("train", "test"):
            if not d[key]:
                raise UsageError(f"[data] source = file needs a {key} path")
            path = _dataset_path(self.base / d[key])
            hashes[str(path)] = content_hash(path)
            out.append(load_dataset(path))
        return out[0], out[1], hashes


def _dataset_path(path: Path) -> Path:
    if not path.exists() and path.with_suffix(".bin").exists():
        return path.with_suffix(".bin")
    if not path.exists():
        raise MismatchError(f"dataset not found: {path}")
    return path


def blob_hash(data: bytes) -> str:
    """Git blob hash (sha1 over a ``blob <len>\\0`` header and the bytes)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    return blob_hash(Path(path).read_bytes())


def _run_dir(out: str | None, name: str) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get(RUNS_ENV, "runs")) / name


def _write_run_files(run_dir: Path, cfg: RunConfig, command: str, inputs: dict[str, str]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(cfg.resolved())
    manifest = {"command": command, "seed": cfg.train.seed, "inputs": inputs}
    (run_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_gendata(args) -> int:
    spec = SynthSpec(args.classes, args.per_class, args.size, args.channels, args.difficulty, args.seed)
    train, test = gen_synth(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.bin")
    save_dataset(test, out / "test.bin")
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> None:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "method", None) is not None:
        over["method"] = METHOD_ALIASES.get(args.method, args.method)
    if getattr(args, "teacher_lr_scale", None) is not None:
        over["teacher_lr_scale"] = args.teacher_lr_scale
    if over:
        d = {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)}
        d.update(over)
        try:
            cfg.train = TrainConfig(**d)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def cmd_pretrain(args) -> int:
    cfg = RunConfig.read(args.config)
    _apply_overrides(cfg, args)
    train, test, inputs = cfg.datasets()
    run_dir = _run_dir(args.out, "teacher")
    _write_run_files(run_dir, cfg, "pretrain", inputs)
    _, mlog = pretrain_teacher(cfg.model["teacher"], train, test, cfg.train, run_dir / "teacher.ckpt")
    mlog.to_csv(run_dir / "metrics.csv")
    print(f"teacher {cfg.model['teacher']} test top1={mlog.last('test')['top1']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = RunConfig.read(args.config)
    _apply_overrides(cfg, args)
    train, test, inputs = cfg.datasets()
    teacher = None
    if cfg.train.method != "ce-only":
        if not args.teacher:
            raise UsageError(f"--teacher is required for {cfg.train.method}")
        teacher = load_checkpoint(args.teacher)
        inputs[str(args.teacher)] = content_hash(args.teacher)
        if teacher.spec.num_classes != train.num_classes or teacher.spec.in_channels != train.image_shape[0]:
            raise MismatchError(f"teacher {teacher.spec.name} does not fit the dataset "
                                f"({train.num_classes} classes, {train.image_shape[0]} channels)")
    run_dir = _run_dir(args.out, cfg.train.method)
    _write_run_files(run_dir, cfg, "distill", inputs)
    result = run(cfg.train, teacher, cfg.model["student"], train, test, run_dir)
    last = result.log.last("test")
    print(f"{cfg.train.method} student {cfg.model['student']} top1={last['top1']:.4f} -> {run_dir}")
    return EXIT_OK


def _load_eval_data(path: str) -> LabeledDataset:
    return load_dataset(_dataset_path(Path(path)))


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    ds = _load_eval_data(args.data)
    if ds.image_shape[0] != model.spec.in_channels or ds.num_classes != model.spec.num_classes:
        raise MismatchError(f"{model.spec.name} does not fit data of shape {ds.image_shape}")
    print(f"top1={evaluate(model, ds):.6f}")
    return EXIT_OK


def _parse_prompt_opts(items: list[str]) -> PromptConfig:
    kw = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"prompt option must look like key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = {"k": "kernels"}.get(key, key)
        if key not in _PROMPT_FIELDS:
            raise UsageError(f"unknown prompt option {key!r}")
        kw[key] = _prompt_value(key, val)
    return PromptConfig(**kw)


def cmd_analyze_flops(args) -> int:
    spec = arch_spec(args.arch, num_classes=args.classes, input_size=args.input_size)
    pcfg = _parse_prompt_opts(args.prompt)
    teacher = build(spec)
    dual = DualForwardTeacher(teacher, pcfg)
    report = count_costs(dual, (spec.in_channels, spec.input_size, spec.input_size))
    closed = prompt_costs(spec, pcfg)
    print(report.to_text(per_layer=args.per_layer))
    print(f"prompt blocks: params={closed.prompt_params:,} MACs={closed.prompt_macs:,}")
    print(f"fusion blocks: params={closed.fusion_params:,} MACs={closed.fusion_macs:,}")
    print(f"prompt+fusion: params={closed.params:,} ({closed.params / 1e6:.2f}M) "
          f"MACs={closed.macs:,} ({closed.macs / 1e6:.2f}M)")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_analyze_gap(args) -> int:
    import csv
    rows = []
    with open(args.rows, newline="") as fh:
        for r in csv.DictReader(fh):
            try:
                rows.append((r["method"], float(r["teacher"]), float(r["student"])))
            except (KeyError, ValueError) as exc:
                raise MismatchError(f"{args.rows}: rows need method,teacher,student columns") from exc
    report = gap_report(rows)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


_SIM_COLS = ("kl_s_t", "kl_s_p", "one_minus_pt_t", "one_minus_pt_p")


def cmd_analyze_similarity(args) -> int:
    a, b = MetricsLog.from_csv(args.a), MetricsLog.from_csv(args.b)
    ra, rb = {r["epoch"]: r for r in a.rows(args.split)}, {r["epoch"]: r for r in b.rows(args.split)}
    epochs = sorted(set(ra) & set(rb))
    if not epochs:
        raise MismatchError(f"no common {args.split} epochs in {args.a} and {args.b}")
    header = ["epoch"] + [f"{c}_{s}" for c in _SIM_COLS for s in ("a", "b")]
    lines = [",".join(header)]
    for e in epochs:
        cells = [str(e)] + [f"{r[c]:.6g}" for c in _SIM_COLS for r in (ra[e], rb[e])]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    mlog = MetricsLog.from_csv(args.csv)
    rows = mlog.rows(args.split)
    if not rows:
        raise MismatchError(f"{args.csv}: no rows for split {args.split!r}")
    cols = [c for c in args.cols.split(",") if c]
    missing = [c for c in cols if c not in rows[0]]
    if missing:
        raise MismatchError(f"{args.csv}: unknown columns {missing}")
    plt.rcParams["svg.hashsalt"] = "dfptkd"
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in rows]
    for c in cols:
        (line,) = ax.plot(epochs, [r[c] for r in rows], marker="o", ms=3, label=c)
        line.set_gid(f"series-{c}")
    ax.set_xlabel("epoch")
    ax.set_title(args.title or f"{Path(args.csv).name} ({args.split})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfptkd", description="Dual-forward path teacher distillation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="write a synthetic train/test dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=250)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--difficulty", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("pretrain", help="train a teacher with cross-entropy")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help=f"run directory (default ${RUNS_ENV}/teacher)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_pretrain)

    d = sub.add_parser("distill", help="train a student against a teacher")
    d.add_argument("--method", choices=sorted(set(METHOD_ALIASES) | set(METHOD_ALIASES.values())))
    d.add_argument("--teacher", help="teacher checkpoint")
    d.add_argument("--config", required=True)
    d.add_argument("--out", help=f"run directory (default ${RUNS_ENV}/<method>)")
    d.add_argument("--teacher-lr-scale", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--epochs", type=int)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="print top-1 accuracy of a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="dataset file (suffix .bin optional)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="cost, gap and similarity reports")
    asub = a.add_subparsers(dest="report", required=True)
    af = asub.add_parser("flops", help="parameters and MACs of a teacher with prompt blocks")
    af.add_argument("--arch", required=True)
    af.add_argument("--prompt", nargs="*", default=[], metavar="KEY=VALUE",
                    help="prompt options, e.g. r1=4,4,4,4 r2=0.5 k=3,5,7")
    af.add_argument("--input-size", type=int)
    af.add_argument("--classes", type=int)
    af.add_argument("--per-layer", action="store_true")
    af.add_argument("--csv")
    af.set_defaults(func=cmd_analyze_flops)
    ag = asub.add_parser("gap", help="teacher-student gap table from a method,teacher,student CSV")
    ag.add_argument("--rows", required=True)
    ag.add_argument("--csv")
    ag.set_defaults(func=cmd_analyze_gap)
    asim = asub.add_parser("similarity", help="compare KL and 1-p_t columns of two metrics CSVs")
    asim.add_argument("--a", required=True)
    asim.add_argument("--b", required=True)
    asim.add_argument("--split", default="test")
    asim.add_argument("--csv")
    asim.set_defaults(func=cmd_analyze_similarity)

    pl = sub.add_parser("plot", help="SVG line chart of metrics CSV columns")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--cols", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--split", default="train")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MismatchError, CheckpointError, DataFormatError, UnknownArchitectureError,
            PromptConfigError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (NonFiniteLossError, FloatingPointError, MemoryError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``budgetprune {train,prune,eval,report,sweep}``.

Configuration is a flat ``key = value`` file (``#`` starts a comment); any
flag given on the command line overrides the file. Exit codes: 0 success,
1 runtime failure or divergence, 2 usage/config error, 3 data-format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import plots
from .budget import BudgetSpec
from .data_io import (Checkpoint, Dataset, load_checkpoint, load_cifar10, save_checkpoint,
                      synthetic_splits)
from .errors import BudgetPruneError, DivergenceError, FormatError, UsageError
from .models import MODEL_NAMES, build
from .pruning import PruneReport, effective_prune, magnitude_prune, measure
from .trainer import TrainConfig, TrainHistory, train

log = logging.getLogger("budgetprune")

DATA_ENV = "BUDGETPRUNE_DATA"
DEFAULT_RATES = (0.90, 0.95, 0.97, 0.99)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3


@dataclass
class RunConfig:
    model: str = "conv4-small"
    dataset: str = "synthetic"
    data_dir: str = ""
    prune_rate: float = 0.9
    lam: float = 5.0
    n: int = 4
    t_init: float = 100.0
    epochs: int = 300
    lr: float = 0.1
    plateau_factor: float = 0.3
    plateau_patience: int = 10
    early_stop_patience: int = 60
    weight_decay: float = 5e-5
    batch_size: int = 128
    momentum: float = 0.9
    tau_lr_scale: float = 1.0
    monitor_pruned: bool = True
    augment: bool = False
    val_split: float = 0.0
    seed: int = 0
    dtype: str = "float64"
    num_classes: int = 10
    synthetic_shape: str = "3x32x32"
    synthetic_train: int = 5000
    synthetic_test: int = 1000
    synthetic_margin: float = 4.0
    synthetic_noise: float = 1.0
    subset: int = 0

    def validate(self) -> None:
        if self.model not in MODEL_NAMES:
            raise UsageError(f"unknown model {self.model!r}; choose from {MODEL_NAMES}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise UsageError(f"dataset must be 'synthetic' or 'cifar10', got {self.dataset!r}")
        if self.dtype not in ("float64", "float32"):
            raise UsageError("dtype must be float64 or float32")
        if not 0.0 <= self.val_split < 1.0:
            raise UsageError("val_split must lie in [0, 1)")
        if self.lam < 0:
            raise UsageError("lambda must be nonnegative")
        if self.subset < 0:
            raise UsageError("subset must be >= 0")
        parse_shape(self.synthetic_shape)
        self.train_config()
        if self.lam > 0:
            BudgetSpec(1.0, self.prune_rate, self.lam)

    @property
    def mode(self) -> str:
        return "reparam" if self.lam > 0 else "plain"

    def train_config(self, mode: str | None = None, **overrides) -> TrainConfig:
        kw = dict(epochs=self.epochs, lr_init=self.lr, plateau_factor=self.plateau_factor,
                  plateau_patience=self.plateau_patience,
                  early_stop_patience=self.early_stop_patience,
                  weight_decay=self.weight_decay, batch_size=self.batch_size,
                  momentum=self.momentum, seed=self.seed, mode=mode or self.mode,
                  monitor_pruned=self.monitor_pruned, augment=self.augment,
                  tau_lr_scale=self.tau_lr_scale)
        kw.update(overrides)
        return TrainConfig(**kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw):
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"config line {lineno}: expected key = value")
        if key == "lambda":
            key = "lam"
        if key not in FIELD_TYPES:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


def parse_shape(text: str) -> tuple:
    try:
        dims = tuple(int(d) for d in str(text).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"bad shape {text!r}; use e.g. 3x32x32") from exc
    if not dims or any(d <= 0 for d in dims):
        raise UsageError(f"bad shape {text!r}")
    return dims


def resolve_config(config_file: str | None, overrides: dict) -> RunConfig:
    values = {}
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    if cfg.dataset == "cifar10" and not cfg.data_dir:
        cfg.data_dir = os.environ.get(DATA_ENV, "")
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    dtype = np.dtype(cfg.dtype)
    if cfg.dataset == "cifar10":
        if not cfg.data_dir:
            raise UsageError(f"cifar10 needs --data-dir or ${DATA_ENV}")
        if not Path(cfg.data_dir).is_dir():
            raise UsageError(f"dataset directory not found: {cfg.data_dir}")
        try:
            train_set, test_set = load_cifar10(cfg.data_dir, dtype=dtype)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    else:
        train_set, test_set = synthetic_splits(
            cfg.seed, cfg.num_classes, cfg.synthetic_train, cfg.synthetic_test,
            parse_shape(cfg.synthetic_shape), cfg.synthetic_margin, cfg.synthetic_noise, dtype)
    if cfg.subset:
        train_set = train_set.subset(cfg.subset)
    if cfg.val_split:
        # tune on a held-out slice of train instead of the test split
        k = int(round(len(train_set) * cfg.val_split))
        val = Dataset(train_set.images[:k], train_set.labels[:k], "val", train_set.num_classes)
        train_set = Dataset(train_set.images[k:], train_set.labels[k:], "train",
                            train_set.num_classes)
        return train_set, val
    return train_set, test_set


def eval_split(cfg: RunConfig) -> Dataset:
    """The split reports are computed on (always the test split)."""
    if cfg.val_split:
        return load_data(RunConfig(**{**asdict(cfg), "val_split": 0.0}))[1]
    return load_data(cfg)[1]


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    run = ckpt.meta.get("run_config")
    if not run:
        raise UsageError("checkpoint carries no run configuration")
    return RunConfig(**run)


def _lock(run_dir: Path) -> FileLock:
    run_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(run_dir / ".lock"), timeout=0)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train_set, monitor_set = load_data(cfg)
    model = build(cfg.model, cfg.num_classes, train_set.shape, seed=cfg.seed,
                  t_init=cfg.t_init, n=cfg.n, dtype=np.dtype(cfg.dtype))
    budget = BudgetSpec(model.count_prunable(), cfg.prune_rate, cfg.lam) if cfg.lam > 0 else None
    with _lock(out):
        (out / "config.txt").write_text(cfg.to_text())
        history_path = out / "history.jsonl"
        history_path.write_text("")
        with history_path.open("a") as fh:
            ckpt, history = train(model, train_set, monitor_set, cfg.train_config(), budget,
                                  callback=lambda rec: fh.write(rec.to_json() + "\n"))
        ckpt.meta["run_config"] = asdict(cfg)
        save_checkpoint(out / "checkpoint.bin", ckpt)
        best = ckpt.to_model()
        report = measure(best, eval_split(cfg), cfg.prune_rate if cfg.lam > 0 else 0.0,
                         method="ours" if cfg.lam > 0 else "plain")
        (out / "train_report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_prune(ckpt_path: Path, p: float, method: str, finetune: bool, out: Path,
              epochs: int | None = None) -> int:
    if method not in ("ours-effective", "magnitude"):
        raise UsageError(f"unknown method {method!r}")
    if finetune and method != "magnitude":
        raise UsageError("--finetune applies to magnitude pruning only; the reparametrized "
                         "network is pruned without fine-tuning")
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    cfg = config_from_checkpoint(ckpt)
    model = ckpt.to_model()
    test_set = eval_split(cfg)
    with _lock(out):
        if method == "ours-effective":
            pruned = effective_prune(model, p)
            label = "ours"
        else:
            if model.mode != "plain":
                raise UsageError("magnitude pruning expects a plainly trained checkpoint "
                                 "(train with --lambda 0)")
            pruned = magnitude_prune(model, p)
            label = "mag"
            if finetune:
                label = "mag+ft"
                train_set, monitor_set = load_data(cfg)
                overrides = {"epochs": epochs} if epochs else {}
                ft_ckpt, history = train(pruned, train_set, monitor_set,
                                         cfg.train_config("finetune", **overrides))
                (out / "finetune_history.jsonl").write_text(history.to_jsonl())
                pruned = ft_ckpt.to_model()
        report = measure(pruned, test_set, p, before=model, method=label)
        new = Checkpoint.from_model(pruned, ckpt.epoch, ckpt.meta.get("config"),
                                    run_config=asdict(cfg), pruned_rate=p, method=label)
        save_checkpoint(out / "checkpoint.bin", new)
        (out / "prune_report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(ckpt_path: Path) -> int:
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    cfg = config_from_checkpoint(ckpt)
    report = measure(ckpt.to_model(), eval_split(cfg), ckpt.meta.get("pruned_rate", 0.0),
                     method=ckpt.meta.get("method", "none"))
    print(report.to_text(), end="")
    return EXIT_OK


def collect_reports(run_dir: Path) -> list[tuple[Path, PruneReport]]:
    found = sorted(run_dir.rglob("prune_report.txt"))
    if not found:
        found = sorted(run_dir.rglob("train_report.txt"))
    return [(p.parent, PruneReport.from_text(p.read_text())) for p in found]


def format_table(rows: list[tuple[Path, PruneReport]], root: Path) -> str:
    header = ("run", "method", "target", "acc_before", "acc_after", "surrogate_frac", "l0_frac")
    lines = [header]

    def acc(v):
        return "-" if v is None else f"{v:.2f}"

    for path, r in rows:
        name = str(path.relative_to(root)) if path != root else "."
        lines.append((name, r.method, f"{r.target_rate:.2f}", acc(r.accuracy_before_effective_prune),
                      acc(r.accuracy_after_effective_prune), f"{r.surrogate_cost_fraction:.4f}",
                      f"{r.exact_nonzero_fraction:.4f}"))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n"
                   for row in lines)


def cmd_report(run_dir: Path, plot: bool = True) -> int:
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    rows = collect_reports(run_dir)
    if not rows:
        raise FileNotFoundError(f"no reports under {run_dir}")
    table = format_table(rows, run_dir)
    (run_dir / "summary.txt").write_text(table)
    plots.write_h_curve(run_dir / "h_curve.csv", t=1.0, n=4)
    histories = {}
    for path in sorted(run_dir.rglob("history.jsonl")):
        histories[str(path.parent.relative_to(run_dir)) or "."] = TrainHistory.from_jsonl(path.read_text())
    if histories:
        plots.write_training_curves(run_dir / "training_curves.csv", histories)
    if plot:
        plots.render_svgs(run_dir, histories)
    print(table, end="")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, rates, baseline: bool, finetune_epochs: int | None) -> int:
    for p in rates:
        run = out / f"ours_p{p:.2f}"
        cmd_train(RunConfig(**{**asdict(cfg), "prune_rate": p}), run)
        cmd_prune(run / "checkpoint.bin", p, "ours-effective", False, run / "pruned")
    if baseline:
        plain = out / "plain"
        cmd_train(RunConfig(**{**asdict(cfg), "lam": 0.0}), plain)
        for p in rates:
            cmd_prune(plain / "checkpoint.bin", p, "magnitude", False, out / f"mag_p{p:.2f}")
            cmd_prune(plain / "checkpoint.bin", p, "magnitude", True, out / f"magft_p{p:.2f}",
                      finetune_epochs)
    return cmd_report(out)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag, "--lambda"] if f.name == "lam" else [flag]
        p.add_argument(*names, dest=f.name, default=None,
                       help=f"(default {_fmt(f.default)})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetprune",
                                     description="Budget-constrained pruning by weight reparametrization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train with the budget loss (or plain when lambda = 0)")
    _add_run_flags(p)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("prune", help="effective or magnitude pruning of a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--prune-rate", "-p", required=True, type=float)
    p.add_argument("--method", choices=("ours-effective", "magnitude"), default="ours-effective")
    p.add_argument("--finetune", action="store_true")
    p.add_argument("--epochs", type=int, help="fine-tuning epochs (default: training epochs)")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print its report")
    p.add_argument("--checkpoint", required=True, type=Path)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("sweep", help="train and prune over several target rates")
    _add_run_flags(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--rates", default=",".join(f"{r:.2f}" for r in DEFAULT_RATES))
    p.add_argument("--baseline", action="store_true", help="also run magnitude pruning +/- fine-tuning")
    p.add_argument("--finetune-epochs", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command in ("train", "sweep"):
            overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
            cfg = resolve_config(args.config, overrides)
            if args.command == "train":
                return cmd_train(cfg, args.out)
            try:
                rates = [float(r) for r in args.rates.split(",") if r.strip()]
            except ValueError as exc:
                raise UsageError(f"bad --rates {args.rates!r}") from exc
            return cmd_sweep(cfg, args.out, rates, args.baseline, args.finetune_epochs)
        if args.command == "prune":
            return cmd_prune(args.checkpoint, args.prune_rate, args.method, args.finetune,
                             args.out, args.epochs)
        if args.command == "eval":
            return cmd_eval(args.checkpoint)
        return cmd_report(args.run_dir, plot=not args.no_plots)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Timeout as exc:
        print(f"error: run directory is locked by another process ({exc})", file=sys.stderr)
        return EXIT_RUNTIME
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (BudgetPruneError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

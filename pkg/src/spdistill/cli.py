"""Command-line entry point: training, evaluation, sweeps, and exporters.

Commands: train-teacher, distill, eval, export-gram, export-activations,
sweep-gamma, export-lsp-error. Settings resolve as defaults, then the
--config file (INI sections), then explicit flags; every run archives its
fully resolved config as <out>/config.resolved.

Exit codes: 0 success, 1 generic/nothing-exported, 2 configuration error,
3 data-format error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import models, trainer
from .data import CIFAR10_MEANS, CIFAR10_STDS, DataSplit, load_cifar10, normalize
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    NumericError,
)
from .losses import METHODS, DistillConfig
from .models import ConvNetSpec, forward_with_taps
from .similarity import LayerPairSet, flatten, gram
from .tensor import Tensor
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULTS = {
    "run": {
        "method": "none",
        "gamma": "3000.0",
        "alpha": "0.9",
        "temperature": "4.0",
        "beta": "1000.0",
        "seed": "0",
        "epochs": "200",
        "pairs": "last_conv:last_conv",
        "out": "",
        "jobs": "1",
    },
    "train": {
        "batch_size": "128",
        "lr": "0.1",
        "lr_milestones": "60,120,160",
        "lr_factor": "0.2",
        "momentum": "0.9",
        "weight_decay": "0.0005",
        "augment": "true",
        "precision": "f32",
        "val_size": "5000",
        "train_subset": "0",
    },
    "data": {
        "dir": "",
        "means": ",".join(str(v) for v in CIFAR10_MEANS),
        "stds": ",".join(str(v) for v in CIFAR10_STDS),
    },
    "teacher": {
        "checkpoint": "",
        "depth_blocks": "4",
        "width_multiplier": "4",
    },
    "student": {
        "depth_blocks": "2",
        "width_multiplier": "1",
    },
}

# (flag dest, section, key) for settings that flags may override
FLAG_MAP = [
    ("method", "run", "method"),
    ("gamma", "run", "gamma"),
    ("alpha", "run", "alpha"),
    ("temperature", "run", "temperature"),
    ("beta", "run", "beta"),
    ("seed", "run", "seed"),
    ("epochs", "run", "epochs"),
    ("pairs", "run", "pairs"),
    ("out", "run", "out"),
    ("jobs", "run", "jobs"),
    ("batch_size", "train", "batch_size"),
    ("lr", "train", "lr"),
    ("lr_milestones", "train", "lr_milestones"),
    ("weight_decay", "train", "weight_decay"),
    ("precision", "train", "precision"),
    ("val_size", "train", "val_size"),
    ("train_subset", "train", "train_subset"),
    ("data_dir", "data", "dir"),
    ("teacher", "teacher", "checkpoint"),
    ("teacher_depth", "teacher", "depth_blocks"),
    ("teacher_width", "teacher", "width_multiplier"),
    ("student_depth", "student", "depth_blocks"),
    ("student_width", "student", "width_multiplier"),
]


def _add_common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="INI config file")
    p.add_argument("--data-dir", metavar="PATH", help="CIFAR-10 binary batch directory")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--gamma", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--temperature", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--pairs", help="teacher:student tap pairs, comma separated")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lr-milestones", help="comma-separated decay epochs")
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--no-augment", action="store_true")
        p.add_argument("--val-size", type=int)
        p.add_argument("--train-subset", type=int)
        p.add_argument("--teacher-depth", type=int)
        p.add_argument("--teacher-width", type=int)
        p.add_argument("--student-depth", type=int)
        p.add_argument("--student-width", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spdistill",
        description="similarity-preserving knowledge distillation for small convnets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a network with plain supervision")
    _add_common(p, training=True)

    p = sub.add_parser("distill", help="train a student under a frozen teacher")
    _add_common(p, training=True)
    p.add_argument("--teacher", metavar="CKPT", help="teacher checkpoint path")

    p = sub.add_parser("eval", help="report test error for a checkpoint")
    p.add_argument("checkpoint", metavar="CKPT")
    _add_common(p)

    p = sub.add_parser("export-gram", help="write a batch similarity matrix as CSV + PGM")
    p.add_argument("checkpoint", metavar="CKPT")
    _add_common(p)
    p.add_argument("--batch-index", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--layer", default="last_conv")
    p.add_argument("--sort-by-class", action="store_true")

    p = sub.add_parser("export-activations",
                       help="write channel-wise average activations over test images")
    p.add_argument("checkpoint", metavar="CKPT")
    _add_common(p)
    p.add_argument("--layer", default="last_conv")
    p.add_argument("--limit", type=int, default=0, help="0 = all test images")

    p = sub.add_parser("sweep-gamma", help="one distillation run per gamma value")
    _add_common(p, training=True)
    p.add_argument("--teacher", metavar="CKPT")
    p.add_argument("--gammas", required=True, help="comma-separated gamma values")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("export-lsp-error",
                       help="collect (run, similarity loss, test error) rows")
    p.add_argument("run_dirs", nargs="*", metavar="RUN_DIR")
    p.add_argument("--out", metavar="CSV", required=True)
    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> dict[str, dict[str, str]]:
    """defaults <- config file <- explicit flags, as a section/key dict."""
    resolved = {section: dict(values) for section, values in DEFAULTS.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise ConfigError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section not in resolved:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in resolved[section]:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                resolved[section][key] = value
    for dest, section, key in FLAG_MAP:
        value = getattr(args, dest, None)
        if value is not None:
            resolved[section][key] = str(value)
    if getattr(args, "no_augment", False):
        resolved["train"]["augment"] = "false"
    return resolved


def write_resolved(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    parser = configparser.ConfigParser()
    for section, values in resolved.items():
        parser[section] = values
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        parser.write(fh)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_pairs(text: str) -> LayerPairSet:
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ConfigError(f"pair {chunk!r} must look like teacher_tap:student_tap")
        t, s = chunk.split(":", 1)
        pairs.append((t.strip(), s.strip()))
    if not pairs:
        raise ConfigError("no layer pairs configured")
    return LayerPairSet(pairs)


def train_config_from(resolved: dict) -> TrainConfig:
    run, tr = resolved["run"], resolved["train"]
    distill = DistillConfig(
        method=run["method"],
        alpha=float(run["alpha"]),
        temperature=float(run["temperature"]),
        beta=float(run["beta"]),
        gamma=float(run["gamma"]),
        pairs=_parse_pairs(run["pairs"]),
    )
    return TrainConfig(
        epochs=int(run["epochs"]),
        batch_size=int(tr["batch_size"]),
        lr=float(tr["lr"]),
        lr_milestones=_ints(tr["lr_milestones"]),
        lr_factor=float(tr["lr_factor"]),
        momentum=float(tr["momentum"]),
        weight_decay=float(tr["weight_decay"]),
        seed=int(run["seed"]),
        precision=tr["precision"],
        augment=_bool(tr["augment"]),
        means=_floats(resolved["data"]["means"]),
        stds=_floats(resolved["data"]["stds"]),
        distill=distill,
    )


def _spec_from(section: dict) -> ConvNetSpec:
    return ConvNetSpec(
        depth_blocks=int(section["depth_blocks"]),
        width_multiplier=int(section["width_multiplier"]),
    )


def load_splits(resolved: dict) -> tuple[DataSplit, DataSplit, DataSplit | None]:
    """Returns (train, test, val); val is carved off the end of the raw
    train set, and train may be reduced to its first train_subset records."""
    data_dir = resolved["data"]["dir"]
    if not data_dir:
        raise ConfigError("no data directory configured (--data-dir or [data] dir)")
    train, test = load_cifar10(data_dir)
    val_size = int(resolved["train"]["val_size"])
    subset = int(resolved["train"]["train_subset"])
    val = None
    if val_size:
        if val_size >= len(train):
            raise ConfigError(f"val_size {val_size} leaves no training data")
        val = train.subset(slice(len(train) - val_size, None))
        train = train.subset(slice(0, len(train) - val_size))
    if subset:
        if subset > len(train):
            raise ConfigError(
                f"train_subset {subset} exceeds available {len(train)} records"
            )
        train = train.subset(slice(0, subset))
    return train, test, val


# ---------------------------------------------------------------------------
# exporters
# ---------------------------------------------------------------------------

def write_pgm(path: str, matrix: np.ndarray) -> None:
    """8-bit binary PGM, linearly mapping [min, max] to 0..255; the scale
    bounds land in a sidecar so absolute comparisons stay possible."""
    lo, hi = float(matrix.min()), float(matrix.max())
    if hi > lo:
        scaled = np.rint((matrix - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(matrix)
    h, w = matrix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.astype(np.uint8).tobytes())
    with open(path + ".scale.txt", "w") as fh:
        fh.write(f"min {lo!r}\nmax {hi!r}\n")


def write_matrix_csv(path: str, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(matrix):
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def _load_frozen(path: str):
    net, _ = models.load(path, trainable=False)
    return net


def cmd_export_gram(args, resolved) -> int:
    net = _load_frozen(args.checkpoint)
    _, test = load_cifar10(resolved["data"]["dir"])
    bs = args.batch_size
    start = args.batch_index * bs
    if start >= len(test):
        raise ConfigError(
            f"batch index {args.batch_index} out of range for {len(test)} test records"
        )
    batch = test.subset(slice(start, start + bs))
    if args.sort_by_class:
        batch = batch.subset(np.argsort(batch.labels, kind="stable"))
    cfg = train_config_like(resolved)
    x = Tensor(normalize(batch.images, cfg.means, cfg.stds, dtype=net.dtype))
    _, taps = forward_with_taps(net, x, [args.layer])
    g = gram(flatten(taps[args.layer])).normalized.data

    if resolved["run"]["out"]:
        write_resolved(resolved["run"]["out"], resolved)
    out_dir = os.path.join(resolved["run"]["out"] or ".", "exports")
    os.makedirs(out_dir, exist_ok=True)
    write_matrix_csv(os.path.join(out_dir, "gram.csv"), g)
    write_pgm(os.path.join(out_dir, "gram.pgm"), g)
    with open(os.path.join(out_dir, "gram_labels.csv"), "w", newline="") as fh:
        csv.writer(fh).writerow([int(v) for v in batch.labels])
    print(f"wrote {out_dir}/gram.csv and gram.pgm ({g.shape[0]}x{g.shape[1]})")
    return EXIT_OK


def train_config_like(resolved: dict) -> TrainConfig:
    """Means/stds and eval batching for export paths; distillation unused."""
    return TrainConfig(
        epochs=1, lr_milestones=(),
        means=_floats(resolved["data"]["means"]),
        stds=_floats(resolved["data"]["stds"]),
    )


def cmd_export_activations(args, resolved) -> int:
    net = _load_frozen(args.checkpoint)
    _, test = load_cifar10(resolved["data"]["dir"])
    order = np.argsort(test.labels, kind="stable")
    if args.limit:
        order = order[: args.limit]
    test = test.subset(order)
    cfg = train_config_like(resolved)

    if resolved["run"]["out"]:
        write_resolved(resolved["run"]["out"], resolved)
    out_dir = os.path.join(resolved["run"]["out"] or ".", "exports")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "activations.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        wrote_header = False
        for start in range(0, len(test), cfg.eval_batch_size):
            sl = slice(start, start + cfg.eval_batch_size)
            x = Tensor(normalize(test.images[sl], cfg.means, cfg.stds, dtype=net.dtype))
            _, taps = forward_with_taps(net, x, [args.layer])
            act = taps[args.layer].data
            channel_means = act.mean(axis=(2, 3))
            if not wrote_header:
                writer.writerow(
                    ["label"] + [f"ch{c}" for c in range(channel_means.shape[1])]
                )
                wrote_header = True
            for label, row in zip(test.labels[sl], channel_means):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])
    print(f"wrote {path} ({len(test)} rows)")
    return EXIT_OK


def cmd_export_lsp_error(args) -> int:
    rows = []
    skipped = []
    for run_dir in args.run_dirs:
        try:
            summary = trainer.read_summary(run_dir)
            rows.append((run_dir, summary["final_lsp"], summary["final_test_error"]))
        except (OSError, ConfigError, KeyError) as exc:
            skipped.append((run_dir, str(exc)))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "lsp", "test_error"])
        for row in rows:
            writer.writerow(row)
    for run_dir, reason in skipped:
        print(f"skipped {run_dir}: {reason}", file=sys.stderr)
    if skipped:
        return EXIT_DATA
    if not rows:
        print("no runs exported", file=sys.stderr)
        return EXIT_GENERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def cmd_train_teacher(args, resolved) -> int:
    cfg = train_config_from(resolved)
    cfg = _force_plain(cfg)
    train, test, val = load_splits(resolved)
    out_dir = resolved["run"]["out"] or None
    if out_dir:
        write_resolved(out_dir, resolved)
    spec = _spec_from(resolved["teacher"])
    net = models.build(spec, seed=cfg.seed, dtype=cfg.dtype)
    result = trainer.train_distilled(net, cfg, train, test, val_split=val,
                                     out_dir=out_dir)
    print(f"final test error {result.final_test_error:.2f}%")
    return EXIT_OK


def _force_plain(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, distill=replace(cfg.distill, method="none"))


def cmd_distill(args, resolved) -> int:
    cfg = train_config_from(resolved)
    ckpt = resolved["teacher"]["checkpoint"]
    teacher = None
    if ckpt:
        teacher, _ = models.load(ckpt, dtype=cfg.dtype, trainable=False)
    elif cfg.distill.needs_teacher_logits or cfg.distill.needs_teacher_taps:
        raise ConfigError(f"method {cfg.distill.method!r} requires --teacher CKPT")
    train, test, val = load_splits(resolved)
    out_dir = resolved["run"]["out"] or None
    if out_dir:
        write_resolved(out_dir, resolved)
    spec = _spec_from(resolved["student"])
    student = models.build(spec, seed=cfg.seed, dtype=cfg.dtype)
    result = trainer.train_distilled(student, cfg, train, test, teacher=teacher,
                                     val_split=val, out_dir=out_dir)
    print(f"final test error {result.final_test_error:.2f}%")
    return EXIT_OK


def cmd_eval(args, resolved) -> int:
    net = _load_frozen(args.checkpoint)
    _, test = load_cifar10(resolved["data"]["dir"])
    cfg = train_config_like(resolved)
    error = trainer.evaluate(net, test, cfg)
    print(f"test error {error:.2f}%")
    return EXIT_OK


def _sweep_worker(resolved: dict, gamma: float) -> tuple[float, float, float | None]:
    resolved = {s: dict(v) for s, v in resolved.items()}
    resolved["run"]["gamma"] = repr(float(gamma))
    base_out = resolved["run"]["out"]
    resolved["run"]["out"] = os.path.join(base_out, f"gamma_{gamma:g}")
    args = argparse.Namespace()
    code = cmd_distill(args, resolved)
    if code != EXIT_OK:
        raise RuntimeError(f"gamma {gamma} run failed with exit code {code}")
    summary = trainer.read_summary(resolved["run"]["out"])
    val = summary["best_val_error"]
    return (
        float(gamma),
        float(summary["final_test_error"]),
        float(val) if val else None,
    )


def cmd_sweep_gamma(args, resolved) -> int:
    gammas = [float(v) for v in args.gammas.split(",") if v.strip()]
    if not gammas:
        raise ConfigError("--gammas needs at least one value")
    out_dir = resolved["run"]["out"]
    if not out_dir:
        raise ConfigError("sweep-gamma requires --out")
    write_resolved(out_dir, resolved)
    jobs = int(resolved["run"]["jobs"])
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_worker, [resolved] * len(gammas), gammas))
    else:
        rows = [_sweep_worker(resolved, g) for g in gammas]
    sweep_path = os.path.join(out_dir, "sweep.csv")
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "final_test_error", "best_val_error"])
        for gamma, test_error, val_error in rows:
            writer.writerow([
                repr(gamma), repr(test_error),
                "" if val_error is None else repr(val_error),
            ])
    print(f"wrote {sweep_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "export-lsp-error":
        return cmd_export_lsp_error(args)
    resolved = resolve_config(args)
    if args.command == "train-teacher":
        return cmd_train_teacher(args, resolved)
    if args.command == "distill":
        return cmd_distill(args, resolved)
    if args.command == "eval":
        return cmd_eval(args, resolved)
    if args.command == "export-gram":
        return cmd_export_gram(args, resolved)
    if args.command == "export-activations":
        return cmd_export_activations(args, resolved)
    if args.command == "sweep-gamma":
        return cmd_sweep_gamma(args, resolved)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())

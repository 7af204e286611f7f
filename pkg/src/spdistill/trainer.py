"""Training loop: SGD with Nesterov momentum, distillation orchestration,
evaluation, and metrics logging.

The default hyperparameters follow the standard CIFAR-10 wide-net
protocol: 200 epochs, batch size 128, initial learning rate 0.1 decayed
by 0.2 at epochs 60/120/160, Nesterov momentum 0.9.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .data import BatchPlan, CIFAR10_MEANS, CIFAR10_STDS, DataSplit, augment_batch, normalize
from .errors import ConfigError, NumericError
from .losses import DistillConfig, total_loss_terms
from .models import Network, forward_with_taps
from .similarity import sp_loss
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "gamma_sweep",
    "lr_at_epoch",
    "measure_sp",
    "sgd_nesterov_step",
    "train_distilled",
]

METRIC_COLUMNS = [
    "epoch", "step", "lr", "loss_ce", "loss_kd_soft", "loss_at", "loss_sp",
    "loss_total", "train_error", "val_error", "test_error", "wall_time",
]


@dataclass
class TrainConfig:
    """Optimization schedule and distillation settings for one run."""

    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple = (60, 120, 160)
    lr_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    precision: str = "f32"
    augment: bool = True
    calibrate_init: bool = True
    eval_batch_size: int = 500
    means: tuple = CIFAR10_MEANS
    stds: tuple = CIFAR10_STDS
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        ms = tuple(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(
            m < 1 or m >= self.epochs for m in ms
        ):
            raise ConfigError(
                f"lr milestones must be strictly increasing and inside (0, epochs); "
                f"got {ms} with epochs={self.epochs}"
            )

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: the decayed rate applies from the milestone epoch on."""
    drops = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_factor ** drops


def median(values) -> float:
    """Median across seeds, the aggregation used for reported errors."""
    return float(np.median(np.asarray(list(values), dtype=np.float64)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_nesterov_step(
    params: dict[str, Tensor],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One Nesterov update in place: v <- mu*v + g~, p <- p - lr*(g~ + mu*v)
    with g~ = grad + wd*p. Weight decay applies to '.w' parameters only.
    """
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise NumericError(f"parameter {name!r} has no gradient; run backward first")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        g = p.grad
        if weight_decay and name.endswith(".w"):
            g = g + weight_decay * p.data
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        state[name] = v
        p.data -= (lr * (g + momentum * v)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _predict(net: Network, images_u8: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    x = Tensor(normalize(images_u8, cfg.means, cfg.stds, dtype=net.dtype))
    logits, _ = forward_with_taps(net, x, ())
    return logits.data.argmax(axis=1)


def evaluate(net: Network, split: DataSplit, cfg: TrainConfig | None = None) -> float:
    """Top-1 error percentage on a split, without augmentation."""
    cfg = cfg or TrainConfig()
    correct = 0
    for start in range(0, len(split), cfg.eval_batch_size):
        sl = slice(start, start + cfg.eval_batch_size)
        preds = _predict(net, split.images[sl], cfg)
        correct += int((preds == split.labels[sl]).sum())
    return 100.0 * (1.0 - correct / len(split))


def measure_sp(
    teacher: Network,
    student: Network,
    split: DataSplit,
    pairs,
    n_batches: int = 10,
    batch_size: int = 128,
    cfg: TrainConfig | None = None,
) -> float:
    """Mean similarity-preserving loss over the first batches of a split."""
    cfg = cfg or TrainConfig()
    teacher_ids = pairs.teacher_ids()
    student_ids = pairs.student_ids()
    values = []
    for b in range(n_batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        images = split.images[sl]
        if len(images) < 2:
            break
        x_t = Tensor(normalize(images, cfg.means, cfg.stds, dtype=teacher.dtype))
        x_s = Tensor(normalize(images, cfg.means, cfg.stds, dtype=student.dtype))
        _, t_taps = forward_with_taps(teacher, x_t, teacher_ids)
        _, s_taps = forward_with_taps(student, x_s, student_ids)
        values.append(sp_loss(t_taps, s_taps, pairs).item())
    if not values:
        raise ConfigError("split too small to measure the similarity loss")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# teacher response caching: with augmentation off, the frozen teacher sees
# each training image unchanged every epoch, so its logits and tapped maps
# can be computed once up front.
# ---------------------------------------------------------------------------

def _cache_teacher(teacher: Network, images_u8: np.ndarray, tap_ids, want_logits,
                   cfg: TrainConfig):
    n = len(images_u8)
    logits_cache = None
    tap_cache: dict[str, np.ndarray] = {}
    for start in range(0, n, cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        x = Tensor(normalize(images_u8[sl], cfg.means, cfg.stds, dtype=teacher.dtype))
        logits, taps = forward_with_taps(teacher, x, tap_ids)
        if want_logits:
            if logits_cache is None:
                logits_cache = np.empty((n, logits.shape[1]), dtype=teacher.dtype)
            logits_cache[sl] = logits.data
        for tid, t in taps.items():
            if tid not in tap_cache:
                tap_cache[tid] = np.empty((n, *t.shape[1:]), dtype=teacher.dtype)
            tap_cache[tid][sl] = t.data
    return logits_cache, tap_cache


@dataclass
class TrainResult:
    student: Network
    metrics: list[dict]
    final_test_error: float
    final_train_error: float
    best_val_error: float | None
    best_epoch: int | None
    final_lsp: float | None
    out_dir: str | None


def _write_metrics_row(writer, fh, row: dict) -> None:
    writer.writerow([row.get(c, "") for c in METRIC_COLUMNS])
    fh.flush()


def train_distilled(
    student: Network,
    cfg: TrainConfig,
    train_split: DataSplit,
    test_split: DataSplit,
    teacher: Network | None = None,
    val_split: DataSplit | None = None,
    out_dir: str | None = None,
) -> TrainResult:
    """Train the student under the configured objective.

    Every step draws one batch, augments it once (shared by teacher and
    student), runs the frozen teacher if the method needs it, computes the
    total loss, backpropagates, and applies one SGD-Nesterov step. Each
    epoch appends a metrics row; checkpoints are written to out_dir when
    given. Identical config and seed reproduce the metrics byte-for-byte
    except for the wall-time column.
    """
    distill = cfg.distill
    needs_teacher = distill.needs_teacher_logits or distill.needs_teacher_taps
    if needs_teacher and teacher is None:
        raise ConfigError(f"method {distill.method!r} requires a teacher network")
    if teacher is not None and teacher.trainable():
        teacher.freeze()

    teacher_ids = distill.pairs.teacher_ids() if distill.needs_teacher_taps else []
    student_ids = distill.pairs.student_ids() if distill.needs_teacher_taps else []

    if cfg.calibrate_init:
        probe = Tensor(normalize(train_split.images[:cfg.batch_size],
                                 cfg.means, cfg.stds, cfg.dtype))
        models.calibrate_init(student, probe)

    # dry-run two samples so tap and shape mismatches surface before step 1
    probe = Tensor(normalize(train_split.images[:2], cfg.means, cfg.stds, cfg.dtype))
    s_logits, s_taps = forward_with_taps(student, probe, student_ids)
    if teacher is not None:
        t_probe = Tensor(normalize(train_split.images[:2], cfg.means, cfg.stds,
                                   dtype=teacher.dtype))
        t_logits, t_taps = forward_with_taps(teacher, t_probe, teacher_ids)
        if needs_teacher:
            total_loss_terms(s_logits, t_logits, train_split.labels[:2],
                             t_taps, s_taps, distill)
    student.zero_grads()

    cache_logits = cache_taps = None
    if teacher is not None and needs_teacher and not cfg.augment:
        cache_logits, cache_taps = _cache_teacher(
            teacher, train_split.images, teacher_ids,
            distill.needs_teacher_logits, cfg,
        )

    plan = BatchPlan(batch_size=cfg.batch_size, seed=cfg.seed)
    opt_state: dict[str, np.ndarray] = {}
    metrics: list[dict] = []
    best_val = None
    best_epoch = None
    started = time.time()

    writer = fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        fh.flush()

    step = 0
    n_train = len(train_split)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            aug_rng = plan.epoch_rng(epoch, stream=1)
            sums = {"ce": 0.0, "kd_soft": 0.0, "at": 0.0, "sp": 0.0, "total": 0.0}
            counts = {k: 0 for k in sums}
            hits = 0
            for idx in plan.batches(n_train, epoch):
                images = train_split.images[idx]
                labels = train_split.labels[idx]
                if cfg.augment:
                    images = augment_batch(images, aug_rng)
                x = Tensor(normalize(images, cfg.means, cfg.stds, cfg.dtype))

                t_logits = t_taps = None
                if teacher is not None and needs_teacher:
                    if cache_taps is not None:
                        if cache_logits is not None:
                            t_logits = Tensor(cache_logits[idx])
                        t_taps = {tid: Tensor(arr[idx]) for tid, arr in cache_taps.items()}
                    else:
                        x_t = Tensor(normalize(images, cfg.means, cfg.stds,
                                               dtype=teacher.dtype))
                        t_logits, t_taps = forward_with_taps(teacher, x_t, teacher_ids)

                s_logits, s_taps = forward_with_taps(student, x, student_ids)
                loss, parts = total_loss_terms(
                    s_logits, t_logits, labels, t_taps, s_taps, distill
                )
                loss.backward()
                sgd_nesterov_step(student.params, opt_state, lr, cfg.momentum,
                                  cfg.weight_decay)
                student.zero_grads()

                hits += int((s_logits.data.argmax(axis=1) == labels).sum())
                for key, value in parts.items():
                    sums[key] += value
                    counts[key] += 1
                step += 1

            train_error = 100.0 * (1.0 - hits / n_train)
            val_error = evaluate(student, val_split, cfg) if val_split is not None else None
            test_error = evaluate(student, test_split, cfg)
            row = {
                "epoch": epoch,
                "step": step,
                "lr": repr(lr),
                "train_error": repr(train_error),
                "test_error": repr(test_error),
                "wall_time": f"{time.time() - started:.3f}",
            }
            if val_error is not None:
                row["val_error"] = repr(val_error)
            for key, col in (("ce", "loss_ce"), ("kd_soft", "loss_kd_soft"),
                             ("at", "loss_at"), ("sp", "loss_sp"),
                             ("total", "loss_total")):
                if counts[key]:
                    row[col] = repr(sums[key] / counts[key])
            metrics.append(row)
            if writer:
                _write_metrics_row(writer, fh, row)

            selector = val_error if val_error is not None else test_error
            if best_val is None or selector < best_val:
                best_val = selector
                best_epoch = epoch
                if out_dir:
                    models.save(student, os.path.join(out_dir, "ckpt_best"),
                                seed=cfg.seed, epoch=epoch, opt_state=opt_state)
    finally:
        if fh:
            fh.close()

    final_lsp = None
    if teacher is not None:
        final_lsp = measure_sp(teacher, student, test_split, cfg.distill.pairs, cfg=cfg)

    result = TrainResult(
        student=student,
        metrics=metrics,
        final_test_error=float(metrics[-1]["test_error"]),
        final_train_error=float(metrics[-1]["train_error"]),
        best_val_error=best_val if val_split is not None else None,
        best_epoch=best_epoch if val_split is not None else None,
        final_lsp=final_lsp,
        out_dir=out_dir,
    )
    if out_dir:
        models.save(student, os.path.join(out_dir, "ckpt_final"),
                    seed=cfg.seed, epoch=cfg.epochs - 1, opt_state=opt_state)
        _write_summary(out_dir, cfg, result)
    return result


SUMMARY_COLUMNS = [
    "method", "gamma", "alpha", "temperature", "beta", "seed", "epochs",
    "final_test_error", "final_train_error", "best_val_error", "best_epoch",
    "final_lsp",
]


def _write_summary(out_dir: str, cfg: TrainConfig, result: TrainResult) -> None:
    row = {
        "method": cfg.distill.method,
        "gamma": repr(cfg.distill.gamma),
        "alpha": repr(cfg.distill.alpha),
        "temperature": repr(cfg.distill.temperature),
        "beta": repr(cfg.distill.beta),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "final_test_error": repr(result.final_test_error),
        "final_train_error": repr(result.final_train_error),
        "best_val_error": "" if result.best_val_error is None else repr(result.best_val_error),
        "best_epoch": "" if result.best_epoch is None else result.best_epoch,
        "final_lsp": "" if result.final_lsp is None else repr(result.final_lsp),
    }
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerow([row[c] for c in SUMMARY_COLUMNS])


def read_summary(run_dir: str) -> dict:
    with open(os.path.join(run_dir, "summary.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise ConfigError(f"{run_dir}: summary.csv should hold exactly one run")
    return rows[0]


def gamma_sweep(
    gammas,
    student_spec: models.ConvNetSpec,
    student_seed: int,
    cfg: TrainConfig,
    train_split: DataSplit,
    test_split: DataSplit,
    teacher: Network,
    val_split: DataSplit | None = None,
    out_dir: str | None = None,
) -> list[dict]:
    """Train one similarity-preserving student per gamma, fixed seed.

    Returns one row per gamma with final test error and validation error;
    when out_dir is set, each run lands in out_dir/gamma_<value>/ and a
    sweep.csv table is written alongside.
    """
    if not gammas:
        raise ConfigError("gamma_sweep needs at least one gamma value")
    rows = []
    for gamma in gammas:
        run_cfg = replace(cfg, distill=replace(cfg.distill, gamma=float(gamma)))
        student = models.build(student_spec, seed=student_seed, dtype=run_cfg.dtype)
        run_dir = os.path.join(out_dir, f"gamma_{gamma:g}") if out_dir else None
        result = train_distilled(
            student, run_cfg, train_split, test_split,
            teacher=teacher, val_split=val_split, out_dir=run_dir,
        )
        rows.append({
            "gamma": float(gamma),
            "final_test_error": result.final_test_error,
            "best_val_error": result.best_val_error,
            "final_lsp": result.final_lsp,
        })
    if out_dir:
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gamma", "final_test_error", "best_val_error", "final_lsp"])
            for row in rows:
                writer.writerow([
                    repr(row["gamma"]), repr(row["final_test_error"]),
                    "" if row["best_val_error"] is None else repr(row["best_val_error"]),
                    "" if row["final_lsp"] is None else repr(row["final_lsp"]),
                ])
    return rows

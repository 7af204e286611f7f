"""Classification and distillation losses: cross-entropy, softened-score
distillation, attention transfer, and the combined training objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, NumericError, ShapeError
from .similarity import LayerPairSet, sp_loss
from .tensor import Tensor

__all__ = [
    "DistillConfig",
    "METHODS",
    "at_loss",
    "ce_loss",
    "kd_loss",
    "total_loss",
    "total_loss_terms",
]

METHODS = ("none", "kd", "at", "sp", "kd+sp", "at+sp")


@dataclass
class DistillConfig:
    """Distillation method and its hyperparameters.

    alpha and temperature weight the softened-score term, beta the
    attention-transfer term, gamma the similarity-preserving term.
    """

    method: str = "none"
    alpha: float = 0.9
    temperature: float = 4.0
    beta: float = 1000.0
    gamma: float = 3000.0
    pairs: LayerPairSet = field(default_factory=LayerPairSet)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        for name, value in (("beta", self.beta), ("gamma", self.gamma)):
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {value}")

    @property
    def needs_teacher_logits(self) -> bool:
        return "kd" in self.method

    @property
    def needs_teacher_taps(self) -> bool:
        return "at" in self.method or "sp" in self.method


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataFormatError(
            f"label out of range: values span [{labels.min()}, {labels.max()}] "
            f"but num_classes is {num_classes}"
        )
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy against integer class labels, via log-softmax."""
    onehot = Tensor(_one_hot(labels, logits.shape[1], logits.dtype))
    picked = (T.log_softmax(logits) * onehot).sum(axis=1)
    return -picked.mean()


def soft_ce(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """Cross-entropy of the student's tempered distribution against the
    teacher's tempered distribution (teacher is the target)."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"logit shape mismatch: student {student_logits.shape}, "
            f"teacher {teacher_logits.shape}"
        )
    target = T.softmax(teacher_logits.detach(), temperature)
    log_probs = T.log_softmax(student_logits / temperature)
    return -(Tensor(target.data) * log_probs).sum(axis=1).mean()


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    labels: np.ndarray,
    alpha: float = 0.9,
    temperature: float = 4.0,
) -> Tensor:
    """Softened-score distillation objective.

    (1 - alpha) * CE(labels, student) plus 2 * alpha * T^2 times the
    cross-entropy of the tempered student scores against the tempered
    teacher scores. The teacher side never receives gradient.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(student_logits.data)) or not np.all(
        np.isfinite(teacher_logits.data)
    ):
        raise NumericError("kd_loss received non-finite logits")
    hard = ce_loss(student_logits, labels)
    soft = soft_ce(student_logits, teacher_logits, temperature)
    return (1.0 - alpha) * hard + (2.0 * alpha * temperature * temperature) * soft


def _attention_rows(activation: Tensor) -> Tensor:
    """Per-sample L2-normalized spatial map from channel-summed squares."""
    b, _, h, w = activation.shape
    energy = (activation * activation).sum(axis=1)
    return T.row_l2_normalize(T.reshape(energy, (b, h * w)))


def at_loss(teacher_taps: dict, student_taps: dict, pairs: LayerPairSet) -> Tensor:
    """Attention-transfer baseline: mean L2 distance between normalized
    spatial attention maps, summed over layer pairs.

    Paired layers must share spatial resolution; the channel counts may
    differ because squared activations are summed over channels first.
    """
    if len(pairs) == 0:
        raise ConfigError("at_loss needs at least one layer pair")
    total = None
    for teacher_id, student_id in pairs:
        if teacher_id not in teacher_taps:
            raise ConfigError(f"teacher taps have no layer {teacher_id!r}")
        if student_id not in student_taps:
            raise ConfigError(f"student taps have no layer {student_id!r}")
        a_t, a_s = teacher_taps[teacher_id], student_taps[student_id]
        if a_t.shape[0] != a_s.shape[0]:
            raise ShapeError(
                f"batch size mismatch for pair ({teacher_id!r}, {student_id!r}): "
                f"{a_t.shape[0]} vs {a_s.shape[0]}"
            )
        if a_t.shape[2:] != a_s.shape[2:]:
            raise ConfigError(
                f"attention transfer needs equal spatial dims per pair, got "
                f"{a_t.shape[2:]} vs {a_s.shape[2:]} for ({teacher_id!r}, {student_id!r}); "
                f"tap layers of equal resolution"
            )
        att_t = _attention_rows(a_t.detach() if a_t.requires_grad else a_t)
        att_s = _attention_rows(a_s)
        diff = att_s - Tensor(att_t.data)
        distances = T.sqrt((diff * diff).sum(axis=1))
        term = distances.mean()
        total = term if total is None else total + term
    return total


def total_loss_terms(
    student_logits: Tensor,
    teacher_logits: Tensor | None,
    labels: np.ndarray,
    teacher_taps: dict | None,
    student_taps: dict | None,
    cfg: DistillConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Training objective plus the plain values of its components.

    The component dict has keys 'ce', 'kd_soft', 'at', 'sp', 'total' with
    raw (unweighted) loss values for metrics logging.
    """
    parts: dict[str, float] = {}
    method = cfg.method

    if method == "kd" or method == "kd+sp":
        if teacher_logits is None:
            raise ConfigError(f"method {method!r} requires teacher logits")
        hard = ce_loss(student_logits, labels)
        soft = soft_ce(student_logits, teacher_logits, cfg.temperature)
        total = (1.0 - cfg.alpha) * hard + (
            2.0 * cfg.alpha * cfg.temperature * cfg.temperature
        ) * soft
        parts["ce"] = hard.item()
        parts["kd_soft"] = soft.item()
    else:
        total = ce_loss(student_logits, labels)
        parts["ce"] = total.item()

    if "at" in method:
        if teacher_taps is None or student_taps is None:
            raise ConfigError(f"method {method!r} requires activation taps")
        at = at_loss(teacher_taps, student_taps, cfg.pairs)
        parts["at"] = at.item()
        total = total + cfg.beta * at

    if "sp" in method:
        if teacher_taps is None or student_taps is None:
            raise ConfigError(f"method {method!r} requires activation taps")
        sp = sp_loss(teacher_taps, student_taps, cfg.pairs)
        parts["sp"] = sp.item()
        total = total + cfg.gamma * sp

    parts["total"] = total.item()
    return total, parts


def total_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | None,
    labels: np.ndarray,
    teacher_taps: dict | None,
    student_taps: dict | None,
    cfg: DistillConfig,
) -> Tensor:
    """Combined objective for the configured method (see DistillConfig)."""
    total, _ = total_loss_terms(
        student_logits, teacher_logits, labels, teacher_taps, student_taps, cfg
    )
    return total

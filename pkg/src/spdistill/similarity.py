"""Pairwise activation-similarity matrices and the similarity-preserving loss.

Given a mini-batch of activation maps (b x c x h x w), each sample's volume
is flattened to one row, the b x b matrix of row inner products is formed,
and rows are L2-normalized. The distillation loss is the mean element-wise
squared difference between teacher and student matrices, summed over the
configured layer pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

__all__ = ["GramMatrix", "LayerPairSet", "flatten", "gram", "sp_loss"]

ZERO_ROW_EPS = 1e-12


@dataclass
class GramMatrix:
    """Unnormalized (Q Q^T) and row-normalized b x b similarity matrices."""

    unnormalized: Tensor
    normalized: Tensor

    @property
    def batch_size(self) -> int:
        return self.unnormalized.shape[0]


@dataclass
class LayerPairSet:
    """Ordered (teacher_layer_id, student_layer_id) pairs to compare."""

    pairs: list[tuple[str, str]] = field(default_factory=lambda: [("last_conv", "last_conv")])

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def teacher_ids(self) -> list[str]:
        return [t for t, _ in self.pairs]

    def student_ids(self) -> list[str]:
        return [s for _, s in self.pairs]


def flatten(activation: Tensor) -> Tensor:
    """Reshape a b x c x h x w activation map to b rows of length c*h*w.

    Row i is the row-major (channel, then row, then column) flattening of
    sample i's volume; reshaping back reproduces the map exactly.
    """
    if activation.ndim != 4:
        raise ShapeError(f"expected a rank-4 activation map, got shape {activation.shape}")
    b = activation.shape[0]
    return T.reshape(activation, (b, -1))


def gram(q: Tensor) -> GramMatrix:
    """Row-similarity matrices of flattened activations, differentiably.

    unnormalized[i, j] is the inner product of rows i and j; normalized
    rows have unit L2 norm, except rows of norm < 1e-12 which stay zero.
    """
    if q.ndim != 2:
        raise ShapeError(f"gram expects b x chw activations, got shape {q.shape}")
    if not np.all(np.isfinite(q.data)):
        raise NumericError("gram received non-finite activations")
    unnormalized = T.matmul(q, T.transpose(q))
    normalized = T.row_l2_normalize(unnormalized, zero_eps=ZERO_ROW_EPS)
    return GramMatrix(unnormalized=unnormalized, normalized=normalized)


def _pair_gram(taps: dict, layer_id: str, who: str) -> GramMatrix:
    if layer_id not in taps:
        raise ConfigError(f"{who} taps have no layer {layer_id!r}; available: {sorted(taps)}")
    return gram(flatten(taps[layer_id]))


def sp_loss(teacher_taps: dict, student_taps: dict, pairs: LayerPairSet) -> Tensor:
    """Similarity-preserving distillation loss over the layer-pair set.

    Returns (1/b^2) * sum over pairs of the squared Frobenius distance
    between the normalized teacher and student matrices, with the 1/b^2
    factor applied once to the whole sum. Gradients flow into the student
    activations only; teacher activations are expected to be detached.
    """
    if len(pairs) == 0:
        raise ConfigError("sp_loss needs at least one layer pair")
    total = None
    batch = None
    for teacher_id, student_id in pairs:
        g_t = _pair_gram(teacher_taps, teacher_id, "teacher")
        g_s = _pair_gram(student_taps, student_id, "student")
        b_t, b_s = g_t.batch_size, g_s.batch_size
        if b_t != b_s:
            raise ShapeError(
                f"batch size mismatch for pair ({teacher_id!r}, {student_id!r}): "
                f"teacher {b_t}, student {b_s}"
            )
        if batch is None:
            batch = b_t
        elif batch != b_t:
            raise ShapeError(f"layer pairs disagree on batch size: {batch} vs {b_t}")
        diff = g_t.normalized.detach() - g_s.normalized
        term = (diff * diff).sum()
        total = term if total is None else total + term
    if batch < 2:
        raise ConfigError(
            "sp_loss needs batch size >= 2: a 1x1 normalized Gram is always [1] "
            "and the loss would be identically zero"
        )
    return total / float(batch * batch)

"""Loss terms of the two-party objective and the prototype scoring rule.

Labels are +1 (attack) and -1 (normal). Every loss returns its value together
with the gradient a caller needs to backpropagate it.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from .errors import AlignmentError, DimensionError, InsufficientDataError, LabelError

ALIGNMENT_KINDS = ("squared_distance", "negative_inner_product")

# beyond this margin exp() of the other branch is below double precision
_LOGISTIC_CUTOFF = 30.0


@dataclass(frozen=True)
class LossBreakdown:
    j_b: float
    j_ab: float
    j_a_reg: float
    j_b_reg: float
    total: float

    def as_tuple(self):
        return astuple(self)


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError(f"labels must be a vector, got shape {y.shape}")
    if y.size and not np.isin(y, (-1, 1)).all():
        bad = sorted(set(np.unique(y).tolist()) - {-1, 1})[:5]
        raise LabelError(f"labels must be -1 or +1, found {bad}")
    return y.astype(np.float64)


def _softplus(u):
    # log(1 + exp(u)), elementwise, overflow-safe
    u = np.asarray(u, dtype=np.float64)
    big = u > _LOGISTIC_CUTOFF
    safe = np.where(big, 0.0, u)
    return np.where(big, u + np.log1p(np.exp(-np.abs(u))), np.log1p(np.exp(safe)))


def _sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(z, y):
    """``log(1 + exp(-z*y))`` and its derivative with respect to ``z``.

    Works on scalars or equal-length arrays.
    """
    scalar = np.ndim(z) == 0 and np.ndim(y) == 0
    yv = check_labels(np.atleast_1d(y))
    zv = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if zv.shape != yv.shape:
        raise AlignmentError(f"{zv.size} scores vs {yv.size} labels")
    margin = -zv * yv
    loss = _softplus(margin)
    grad = -yv * _sigmoid(margin)
    if scalar:
        return float(loss[0]), float(grad[0])
    return loss, grad


def compute_prototype(z, y) -> np.ndarray:
    """Label-weighted mean of source latents, ``(1/n) * sum_i y_i z_i``."""
    z = np.asarray(z, dtype=np.float64)
    y = check_labels(y)
    if z.ndim != 2:
        raise DimensionError(f"latents must be 2-D, got shape {z.shape}")
    if z.shape[0] == 0:
        raise InsufficientDataError("prototype needs at least one labeled latent")
    if z.shape[0] != y.size:
        raise AlignmentError(f"{z.shape[0]} latents vs {y.size} labels")
    return (y @ z) / z.shape[0]


def prediction_score(phi, z) -> np.ndarray:
    """Inner product of each row of ``z`` with the prototype."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != phi.size:
        raise DimensionError(f"latents of shape {z.shape} vs prototype of length {phi.size}")
    return z @ phi


def classify(scores) -> np.ndarray:
    """Score >= 0 maps to attack (+1), otherwise normal (-1)."""
    return np.where(np.asarray(scores) >= 0.0, 1, -1).astype(np.int8)


def prediction_loss(y, scores):
    """Summed logistic loss over the overlap; returns ``(J, dJ/dscore)``."""
    y = check_labels(y)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size != y.size:
        raise AlignmentError(f"{scores.size} scores vs {y.size} labels")
    if y.size == 0:
        return 0.0, np.zeros(0)
    loss, grad = logistic_loss(scores, y)
    return float(loss.sum()), grad


def alignment_loss(za, zb, kind="squared_distance"):
    """Alignment penalty between paired latents.

    Returns:
        ``(J, dJ/dza, dJ/dzb)``. ``squared_distance`` sums ``|za_i - zb_i|^2``;
        ``negative_inner_product`` sums ``-za_i . zb_i``.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape or za.ndim != 2:
        raise AlignmentError(f"paired latents differ: {za.shape} vs {zb.shape}")
    if kind == "squared_distance":
        diff = za - zb
        return float(np.sum(diff * diff)), 2.0 * diff, -2.0 * diff
    if kind == "negative_inner_product":
        return float(-np.sum(za * zb)), -zb.copy(), -za.copy()
    raise AlignmentError(f"unknown alignment kind {kind!r}")


def regularization(model) -> float:
    """Sum of squared Frobenius norms of the weight matrices (biases excluded)."""
    return float(sum(np.sum(w * w) for w in model.weights))


def total_loss(j_b, j_ab, j_a_reg, j_b_reg, gamma, lam) -> LossBreakdown:
    total = j_b + gamma * j_ab + (lam / 2.0) * (j_a_reg + j_b_reg)
    return LossBreakdown(float(j_b), float(j_ab), float(j_a_reg), float(j_b_reg), float(total))


def is_finite_breakdown(b: LossBreakdown) -> bool:
    return all(math.isfinite(v) for v in b.as_tuple())

"""Training objectives and their schedules.

The consistency loss is a soft Dice disagreement between two probability
maps; the segmentation loss is per-voxel cross entropy against one-hot
labels.  Both are computed in float64 regardless of input dtype, and both
come with analytic gradients with respect to the first probability
argument (the training path treats the second map as a constant target).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import LabelMap, ProbabilityMap, one_hot
from .errors import ConfigError, ShapeError

# Smoothing added to each class's Dice numerator and denominator: a class
# absent from both maps contributes a perfect-agreement term of 1.
DICE_EPS = 1e-6

# Probabilities are clamped to this range before the log in cross entropy.
CE_CLAMP = 1e-7


@dataclass(frozen=True)
class RampSchedule:
    """Consistency weight ramp-up: exp(-5 (1 - S/L)^2) for S <= L, then 1."""

    ramp_length: int = 400

    def __post_init__(self):
        if self.ramp_length < 1:
            raise ConfigError("ramp_length must be >= 1")


@dataclass(frozen=True)
class EmaSchedule:
    """Teacher decay: alpha_rampup for the first L steps, alpha_after then."""

    ramp_length: int = 400
    alpha_rampup: float = 0.99
    alpha_after: float = 0.999

    def __post_init__(self):
        for a in (self.alpha_rampup, self.alpha_after):
            if not (0.0 <= a < 1.0):
                raise ConfigError("EMA decay values must lie in [0, 1)")


def beta(step: int, sched: RampSchedule) -> float:
    """Consistency weighting coefficient at training step ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step > sched.ramp_length:
        return 1.0
    frac = 1.0 - step / sched.ramp_length
    return math.exp(-5.0 * frac * frac)


def alpha(step: int, sched: EmaSchedule) -> float:
    """EMA decay at (post-update) step index ``step`` (1-based)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return sched.alpha_rampup if step <= sched.ramp_length else sched.alpha_after


def total_loss(ls: float, lc: float, step: int, sched: RampSchedule) -> float:
    """Weighted sum of the supervised and consistency terms."""
    return ls + beta(step, sched) * lc


def _check_pair(a: ProbabilityMap, b: ProbabilityMap):
    if a.probs.shape != b.probs.shape:
        raise ShapeError(
            f"probability maps disagree in shape: {a.probs.shape} vs {b.probs.shape}"
        )


def _class_range(num_classes: int, include_background: bool) -> range:
    return range(0 if include_background else 1, num_classes)


def consistency_loss(
    p_student: ProbabilityMap,
    p_teacher: ProbabilityMap,
    include_background: bool = True,
) -> float:
    """Soft Dice disagreement, 1 minus the class-averaged Dice overlap.

    Symmetric in its arguments and always in [0, 1].  With
    ``include_background=False`` the class average skips channel 0.
    """
    _check_pair(p_student, p_teacher)
    a = p_student.probs.astype(np.float64, copy=False)
    b = p_teacher.probs.astype(np.float64, copy=False)
    classes = _class_range(p_student.num_classes, include_background)
    acc = 0.0
    for i in classes:
        num = 2.0 * float((a[i] * b[i]).sum()) + DICE_EPS
        den = float(a[i].sum()) + float(b[i].sum()) + DICE_EPS
        acc += num / den
    return 1.0 - acc / len(classes)


def consistency_loss_grad(
    p_student: ProbabilityMap,
    p_teacher: ProbabilityMap,
    include_background: bool = True,
) -> np.ndarray:
    """d consistency_loss / d p_student, with the teacher map held constant."""
    _check_pair(p_student, p_teacher)
    a = p_student.probs.astype(np.float64, copy=False)
    b = p_teacher.probs.astype(np.float64, copy=False)
    classes = _class_range(p_student.num_classes, include_background)
    grad = np.zeros_like(a)
    k = len(classes)
    for i in classes:
        num = 2.0 * float((a[i] * b[i]).sum()) + DICE_EPS
        den = float(a[i].sum()) + float(b[i].sum()) + DICE_EPS
        # d(num/den)/da_v = (2 b_v den - num) / den^2
        grad[i] = -(2.0 * b[i] * den - num) / (den * den) / k
    return grad


def segmentation_loss(p: ProbabilityMap, y: LabelMap) -> float:
    """Mean per-voxel cross entropy against one-hot labels (nonnegative)."""
    if p.spatial_shape != y.shape:
        raise ShapeError(
            f"prediction spatial shape {p.spatial_shape} != label shape {y.shape}"
        )
    if p.num_classes != y.num_classes:
        raise ShapeError("prediction and labels disagree in class count")
    probs = np.clip(p.probs.astype(np.float64, copy=False), CE_CLAMP, 1.0 - CE_CLAMP)
    onehot = one_hot(y).probs
    v = p.num_voxels
    return float(-(onehot * np.log(probs)).sum() / v)


def segmentation_loss_grad(p: ProbabilityMap, y: LabelMap) -> np.ndarray:
    """d segmentation_loss / d p.  Zero where the clamp is active."""
    if p.spatial_shape != y.shape:
        raise ShapeError("prediction/label shape mismatch")
    raw = p.probs.astype(np.float64, copy=False)
    probs = np.clip(raw, CE_CLAMP, 1.0 - CE_CLAMP)
    onehot = one_hot(y).probs
    v = p.num_voxels
    grad = -onehot / probs / v
    grad[(raw < CE_CLAMP) | (raw > 1.0 - CE_CLAMP)] = 0.0
    return grad

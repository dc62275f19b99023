"""Temperature softening, target/non-target split and distillation losses.

Two layers live here. The ``SoftPrediction`` family works on plain arrays in
log-space and is used for analysis and exact checks of the decomposition
``KL(p_T||p_S) = KL(b_T||b_S) + (1 - p_t^T) KL(q_T||q_S)``. The tensor-level
functions (:func:`cross_entropy`, :func:`distillation_loss`) are the
differentiable training losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TAU = 4.0


class DegenerateDistributionError(ValueError):
    """No probability mass outside the target class."""


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


@dataclass(frozen=True)
class SoftPrediction:
    """Softened class distribution p = softmax(z / tau) along the last axis."""

    z: np.ndarray
    tau: float

    @property
    def log_p(self) -> np.ndarray:
        s = self.z / self.tau
        return s - _logsumexp(s)[..., None]

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.log_p)

    @property
    def num_classes(self) -> int:
        return self.z.shape[-1]


@dataclass(frozen=True)
class TargetSplit:
    p_t: float | np.ndarray
    p_not_t: float | np.ndarray
    t: int | np.ndarray


@dataclass(frozen=True)
class NonTargetDist:
    q: np.ndarray
    t: int


def soften(z, tau: float = DEFAULT_TAU) -> SoftPrediction:
    _check_tau(tau)
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return SoftPrediction(z, float(tau))


def _check_target(p: SoftPrediction, t: int) -> None:
    if not 0 <= t < p.num_classes:
        raise IndexError(f"target {t} outside [0, {p.num_classes})")


def _log_split(p: SoftPrediction, t: int) -> tuple[float, float]:
    """(log p_t, log p_not_t) for a single prediction."""
    s = p.z / p.tau
    lse = _logsumexp(s)
    rest = np.delete(s, t, axis=-1)
    return float(s[t] - lse), float(_logsumexp(rest) - lse)


def split_target(p: SoftPrediction, t: int) -> TargetSplit:
    _check_target(p, t)
    probs = p.p
    return TargetSplit(float(probs[t]), float(np.delete(probs, t).sum()), t)


def _log_q(p: SoftPrediction, t: int) -> np.ndarray:
    s = np.delete(p.z / p.tau, t, axis=-1)
    return s - _logsumexp(s)


def nontarget_distribution(p: SoftPrediction, t: int) -> NonTargetDist:
    _check_target(p, t)
    if p.num_classes < 2 or not np.delete(p.p, t).sum() > 0:
        raise DegenerateDistributionError("target class holds all probability mass")
    return NonTargetDist(np.exp(_log_q(p, t)), t)


def kl_divergence(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    """KL(a||b) along the last axis from log-probabilities."""
    a = np.exp(log_a)
    terms = np.where(a > 0, a * (log_a - log_b), 0.0)
    return terms.sum(axis=-1)


def kl_distillation(p_teacher: SoftPrediction, p_student: SoftPrediction,
                    compensate: bool = True) -> float | np.ndarray:
    """sum_i p_T[i] log(p_T[i] / p_S[i]), times tau^2 when ``compensate``."""
    if p_teacher.num_classes != p_student.num_classes:
        raise ValueError("teacher and student class counts differ")
    if p_teacher.tau != p_student.tau:
        raise ValueError("teacher and student temperatures differ")
    kl = kl_divergence(p_teacher.log_p, p_student.log_p)
    if compensate:
        kl = kl * p_teacher.tau ** 2
    return float(kl) if np.ndim(kl) == 0 else kl


def decompose_kd(p_teacher: SoftPrediction, p_student: SoftPrediction, t: int) -> tuple[float, float, float]:
    """Return (binary_term, nontarget_term, 1 - p_t^T).

    binary_term + weight * nontarget_term equals the uncompensated KD loss.
    """
    _check_target(p_teacher, t)
    lt_T, lr_T = _log_split(p_teacher, t)
    lt_S, lr_S = _log_split(p_student, t)
    if not np.isfinite(lr_T) or not np.isfinite(lr_S):
        raise DegenerateDistributionError("target class holds all probability mass")
    binary = float(kl_divergence(np.array([lt_T, lr_T]), np.array([lt_S, lr_S])))
    nontarget = float(kl_divergence(_log_q(p_teacher, t), _log_q(p_student, t)))
    weight = float(-np.expm1(lt_T))
    return binary, nontarget, weight


# -- differentiable losses ------------------------------------------------------

def _one_hot(labels, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(z: Tensor, y) -> Tensor:
    """Mean of -log softmax(z)[y] over the batch. Accepts a single logit vector too."""
    if z.ndim == 1:
        z = z.reshape(1, -1)
    onehot = _one_hot(y, z.shape[1], z.dtype)
    return -(T.log_softmax(z, axis=1) * onehot).sum() / z.shape[0]


def distillation_loss(z_student: Tensor, z_target, tau: float = DEFAULT_TAU,
                      compensate: bool = True) -> Tensor:
    """Batch-mean KL(softmax(z_target/tau) || softmax(z_student/tau)).

    ``z_target`` is treated as a constant: a Tensor argument is detached here,
    so callers wanting gradient into the target must not route it through this
    function.
    """
    _check_tau(tau)
    target = z_target.data if isinstance(z_target, Tensor) else np.asarray(z_target, dtype=z_student.dtype)
    if z_student.ndim == 1:
        z_student = z_student.reshape(1, -1)
        target = target.reshape(1, -1)
    if target.shape != z_student.shape:
        raise T.ShapeError(f"logit shapes differ: {z_student.shape} vs {target.shape}")
    s = target / tau
    log_pt = s - _logsumexp(s, axis=1)[:, None]
    pt = np.exp(log_pt).astype(z_student.dtype)
    log_ps = T.log_softmax(z_student * (1.0 / tau), axis=1)
    const = float(np.sum(np.exp(log_pt) * log_pt))
    kl = (const - (log_ps * pt).sum()) / z_student.shape[0]
    return kl * (tau ** 2) if compensate else kl

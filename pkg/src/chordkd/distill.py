"""Loss functions and their analytic gradients.

Implements the temperature-scaled distillation loss tau^2 * KL(teacher || student),
its gradient tau * (p_student - p_teacher), plain cross-entropy, the selective
confidence weighting, and the stage-dependent combined objective
alpha * L_KD + (1 - alpha) * L_C.

All functions take raw logits; batched variants operate on (N, C) arrays with
classes on the last axis.  Teacher confidences for selective weighting are
computed at temperature 1 (raw prediction certainty), independent of the KD
temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KdConfig",
    "softmax_t",
    "log_softmax_t",
    "kd_loss",
    "kd_grad",
    "ce_loss",
    "ce_loss_batch",
    "selective_weight",
    "selective_kd_loss",
    "total_loss",
]


@dataclass(frozen=True)
class KdConfig:
    """Distillation hyperparameters: loss mix, temperature, selective band."""

    alpha: float = 0.3
    tau: float = 3.0
    theta_min: float = 0.1
    theta_max: float = 0.9
    k: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.theta_min < self.theta_max <= 1.0:
            raise ValueError("need 0 <= theta_min < theta_max <= 1")
        if not 0.0 < self.k <= 1.0:
            raise ValueError("k must lie in (0, 1]")


def _check_finite(name: str, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contains non-finite values")
    return z


def log_softmax_t(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Numerically stable log-softmax of z / tau along the last axis."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = _check_finite("logits", z) / tau
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_t(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction; rows sum to 1."""
    return np.exp(log_softmax_t(z, tau))


def kd_loss(z_s: np.ndarray, z_t: np.ndarray, tau: float) -> float | np.ndarray:
    """tau^2-scaled KL divergence from the teacher's soft targets to the student's.

    Zero exactly when the logits differ by a constant shift.  Returns a float
    for single logit vectors and a per-sample array for batches.
    """
    log_p_t = log_softmax_t(z_t, tau)
    log_p_s = log_softmax_t(z_s, tau)
    p_t = np.exp(log_p_t)
    kl = (p_t * (log_p_t - log_p_s)).sum(axis=-1)
    out = tau * tau * kl
    return float(out) if out.ndim == 0 else out


def kd_grad(z_s: np.ndarray, z_t: np.ndarray, tau: float) -> np.ndarray:
    """Gradient of :func:`kd_loss` w.r.t. the student logits: tau * (p_s - p_t)."""
    return tau * (softmax_t(z_s, tau) - softmax_t(z_t, tau))


def ce_loss(z: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Cross-entropy -log softmax(z)[y] with gradient softmax(z) - onehot(y)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("ce_loss expects a single logit vector; use ce_loss_batch")
    losses, grads = ce_loss_batch(z[None, :], np.array([y]))
    return float(losses[0]), grads[0]


def ce_loss_batch(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized cross-entropy over an (N, C) batch; returns (losses, grads)."""
    z = _check_finite("logits", z)
    y = np.asarray(y, dtype=np.int64)
    n, c = z.shape
    if y.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError("class index out of range")
    log_p = log_softmax_t(z, 1.0)
    losses = -log_p[np.arange(n), y]
    grads = np.exp(log_p)
    grads[np.arange(n), y] -= 1.0
    return losses, grads


def selective_weight(c: float | np.ndarray, cfg: KdConfig) -> float | np.ndarray:
    """Asymmetric confidence weight: 0 below theta_min, 1 in the informative
    band, linearly down-weighted (by at most k) above theta_max."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("confidence must lie in [0, 1]")
    high = 1.0 - cfg.k * (c - cfg.theta_max) / (1.0 - cfg.theta_max)
    w = np.where(c < cfg.theta_min, 0.0, np.where(c <= cfg.theta_max, 1.0, high))
    return float(w) if w.ndim == 0 else w


def _teacher_confidence(z_t: np.ndarray) -> np.ndarray:
    return softmax_t(z_t, 1.0).max(axis=-1)


def selective_kd_loss(z_s: np.ndarray, z_t: np.ndarray, cfg: KdConfig) -> float:
    """Mean over the batch of w(teacher confidence) * per-sample KD loss."""
    z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    if z_s.shape[0] == 0:
        raise ValueError("selective KD needs a non-empty batch")
    w = selective_weight(_teacher_confidence(z_t), cfg)
    return float(np.mean(w * kd_loss(z_s, z_t, cfg.tau)))


def total_loss(
    stage: int,
    z_s: np.ndarray,
    y: np.ndarray,
    cfg: KdConfig,
    z_t: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Stage-dependent objective alpha * L_KD + (1 - alpha) * L_C with its gradient.

    Stage 1 pairs cross-entropy against pseudo-labels with plain KD; stage 2
    pairs cross-entropy against ground truth with selective KD.  With
    alpha = 0 the teacher logits are never touched and the result reduces to
    the classification loss exactly.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    n = z_s.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    y = np.asarray(y, dtype=np.int64).reshape(n)

    ce_losses, ce_grads = ce_loss_batch(z_s, y)
    loss = (1.0 - cfg.alpha) * float(ce_losses.mean())
    grad = (1.0 - cfg.alpha) * ce_grads / n

    if cfg.alpha > 0.0:
        if z_t is None:
            raise ValueError("teacher logits required when alpha > 0")
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        if stage == 2:
            w = np.asarray(selective_weight(_teacher_confidence(z_t), cfg))
        else:
            w = np.ones(n)
        kd_losses = np.atleast_1d(kd_loss(z_s, z_t, cfg.tau))
        loss += cfg.alpha * float(np.mean(w * kd_losses))
        grad = grad + cfg.alpha * w[:, None] * kd_grad(z_s, z_t, cfg.tau) / n
    return loss, grad

"""Probability normalization over the simplex.

Temperature softmax, the sparsemax Euclidean projection, and the annealed
variant that divides its input by a stepwise-decaying temperature. The
annealed form is a projection (argmin of the squared distance); it is
sometimes written with argmax in the literature, which we read as a typo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError


@dataclass(frozen=True)
class AnnealSchedule:
    """Stepwise temperature decay: tau0 * factor**(n // interval)."""

    tau0: float = 1.5
    factor: float = 0.75
    interval: int = 5

    def __post_init__(self):
        if self.tau0 <= 0:
            raise ParameterError(f"tau0 must be positive, got {self.tau0}")
        if not 0 < self.factor <= 1:
            raise ParameterError(f"factor must be in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise ParameterError(f"interval must be >= 1, got {self.interval}")

    def temperature_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ParameterError(f"epoch must be >= 0, got {epoch}")
        return self.tau0 * self.factor ** (epoch // self.interval)


def _validate(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size < 1:
        raise ValidationError(f"expected a non-empty 1-D array, got shape {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise ValidationError("input contains NaN or Inf")
    return alpha


def softmax_tau(alpha, tau: float) -> np.ndarray:
    """softmax(alpha / tau), max-subtracted for stability; strictly positive."""
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    alpha = _validate(alpha)
    z = alpha / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def sparsemax(alpha) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Sort-and-threshold: with z sorted descending, the support size is
    k* = max{k : 1 + k*z_k > cumsum(z)_k} and the threshold is
    theta = (cumsum(z)_{k*} - 1) / k*. Components outside the support are
    exactly zero.
    """
    alpha = _validate(alpha)
    z = np.sort(alpha)[::-1]
    cssv = np.cumsum(z)
    ks = np.arange(1, alpha.size + 1)
    support = 1.0 + ks * z > cssv
    k_star = ks[support][-1]
    theta = (cssv[k_star - 1] - 1.0) / k_star
    return np.maximum(alpha - theta, 0.0)


def annealed_sparsemax(alpha, schedule: AnnealSchedule, epoch: int) -> np.ndarray:
    """sparsemax(alpha / temperature), temperature from the decay schedule."""
    return sparsemax(np.asarray(alpha, dtype=np.float64) / schedule.temperature_at(epoch))


def sparsemax_jacobian_vec(alpha, v) -> np.ndarray:
    """J(alpha) @ v for the sparsemax Jacobian.

    On the support S the Jacobian is I - (1/|S|) 11^T; off-support rows and
    columns are zero. At support-change boundaries the Jacobian of the
    current support is used.
    """
    alpha = _validate(alpha)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != alpha.shape:
        raise ValidationError(f"v shape {v.shape} != alpha shape {alpha.shape}")
    p = sparsemax(alpha)
    support = p > 0
    out = np.zeros_like(alpha)
    out[support] = v[support] - v[support].mean()
    return out


def softmax_tau_jacobian_vec(alpha, tau: float, v) -> np.ndarray:
    """J @ v for softmax_tau; J = (diag(p) - p p^T) / tau (symmetric)."""
    p = softmax_tau(alpha, tau)
    v = np.asarray(v, dtype=np.float64)
    return (p * v - p * (p @ v)) / tau

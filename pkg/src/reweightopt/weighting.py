"""Per-sample importance weights computed from loss values.

Each weighting rule maps a per-sample loss u to a multiplicative weight
g(u) >= 1 that emphasizes hard (high-loss) samples.  The loss fed into
g is always clamped to [0, tau], which bounds the weights and protects
the update from outliers.  Three variants are provided:

    kl          g(u) = exp(clip(u, 0, tau) / (tau + 1))
    chi2        g(u) = clip(u, 0, tau) + tau
    reverse_kl  g(u) = (1 - clip(u, 0, tau) / (tau + 1))**-1

plus ``none`` (all weights exactly 1, plain averaging).  The scale
1/(tau+1) inside the kl and reverse_kl forms is tied to the clip level;
``gamma_override`` exists only for ablation sweeps.

All functions are pure and operate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Divergence",
    "WeightingRule",
    "as_loss_vector",
    "weight_kl",
    "weight_chi2",
    "weight_revkl",
    "batch_weights",
    "weighted_objective",
    "saturation_fraction",
]


class Divergence(str, Enum):
    KL = "kl"
    CHI2 = "chi2"
    REVERSE_KL = "reverse_kl"
    NONE = "none"


@dataclass(frozen=True)
class WeightingRule:
    """Divergence variant plus clip level; fully determines g.

    ``gamma_override`` replaces the default scale 1/(tau+1) in the kl
    exponent.  It is an ablation-only knob; leave it None for the
    standard coupling.
    """

    divergence: Divergence = Divergence.NONE
    tau: float = 1.0
    gamma_override: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be a positive finite real, got {self.tau}")
        if self.gamma_override is not None and not (
            math.isfinite(self.gamma_override) and self.gamma_override > 0
        ):
            raise ValueError(f"gamma_override must be positive, got {self.gamma_override}")

    @property
    def gamma(self) -> float:
        """Exponent scale: 1/(tau+1) unless explicitly overridden."""
        if self.gamma_override is not None:
            return self.gamma_override
        return 1.0 / (self.tau + 1.0)


def as_loss_vector(values) -> np.ndarray:
    """Validate and convert per-sample losses to a float64 array.

    Rejects empty input and any NaN/Inf entry.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise ValueError("loss vector must contain at least one entry")
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(arr))
        raise ValueError(f"non-finite loss values at indices {bad.tolist()}")
    return arr


def _check_scalar(u: float) -> float:
    u = float(u)
    if not math.isfinite(u):
        raise ValueError(f"loss value must be finite, got {u}")
    return u


def weight_kl(u: float, tau: float, gamma: float | None = None) -> float:
    """Clipped exponential weight exp(clip(u, 0, tau) * gamma).

    gamma defaults to 1/(tau+1), so the exponent lies in [0, tau/(tau+1)]
    and the weight in [1, e^{tau/(tau+1)}].
    """
    u = _check_scalar(u)
    if tau <= 0:
        raise ValueError("tau must be positive")
    clipped = min(max(u, 0.0), tau)
    # divide rather than multiply by a precomputed 1/(tau+1): saturation at
    # u >= tau must equal exp(tau/(tau+1)) bit-for-bit
    if gamma is None:
        return math.exp(clipped / (tau + 1.0))
    return math.exp(clipped * gamma)


def weight_chi2(u: float, tau: float) -> float:
    """Additive weight clip(u, 0, tau) + tau, bounded in [tau, 2*tau]."""
    u = _check_scalar(u)
    if tau <= 0:
        raise ValueError("tau must be positive")
    return min(max(u, 0.0), tau) + tau


def weight_revkl(u: float, tau: float) -> float:
    """Inverse-gap weight (1 - clip(u, 0, tau)/(tau+1))**-1.

    The clamp keeps the denominator >= 1/(tau+1), so the weight is
    always finite and bounded by tau+1.
    """
    u = _check_scalar(u)
    if tau <= 0:
        raise ValueError("tau must be positive")
    # min() repairs the 1-ulp overshoot of 1/(1 - tau/(tau+1)) at saturation;
    # the exact value there is tau+1
    return min(1.0 / (1.0 - min(max(u, 0.0), tau) / (tau + 1.0)), tau + 1.0)


def batch_weights(losses, rule: WeightingRule) -> np.ndarray:
    """Apply a weighting rule element-wise to a vector of losses.

    Vectorized counterpart of the scalar weight functions; arithmetic is
    identical, so saturation values match bit-for-bit.
    """
    arr = as_loss_vector(losses)
    if rule.divergence is Divergence.NONE:
        return np.ones_like(arr)
    clipped = np.clip(arr, 0.0, rule.tau)
    if rule.divergence is Divergence.KL:
        if rule.gamma_override is None:
            return np.exp(clipped / (rule.tau + 1.0))
        return np.exp(clipped * rule.gamma_override)
    if rule.divergence is Divergence.CHI2:
        return clipped + rule.tau
    if rule.divergence is Divergence.REVERSE_KL:
        return np.minimum(1.0 / (1.0 - clipped / (rule.tau + 1.0)), rule.tau + 1.0)
    raise ValueError(f"unknown divergence {rule.divergence!r}")


def weighted_objective(losses, weights) -> float:
    """Mean of weight*loss with the weights held constant.

    This is the reported training objective; its gradient with frozen
    weights equals the weighted mean of per-sample gradients.
    """
    ell = as_loss_vector(losses)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != ell.shape:
        raise ValueError(f"length mismatch: {ell.size} losses vs {w.size} weights")
    return float(np.mean(w * ell))


def saturation_fraction(losses, rule: WeightingRule) -> float:
    """Fraction of samples whose loss hit the upper clip (u >= tau)."""
    arr = as_loss_vector(losses)
    if rule.divergence is Divergence.NONE:
        return 0.0
    return float(np.mean(arr >= rule.tau))

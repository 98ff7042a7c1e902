"""Differentiable objectives over per-timestep change probabilities.

Two training criteria are provided:

* the detection objective, a sum of an expected-detection-delay term and a
  weighted expected-time-to-false-alarm term under the Bernoulli stopping
  model (both closed-form polynomials in the probabilities, with analytic
  gradients), and
* plain binary cross-entropy against step labels ``y_t = 1[t >= theta]``.

Sign convention for the false-alarm term: it is the *negated* expected
censored alarm time, so minimizing it pushes alarms later on change-free
prefixes.  A variant that flips the sign of the censoring reward would
prefer an immediate alarm over silence on change-free data; the test suite
guards against that regression.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np

from .core import ProbabilitySeries

__all__ = [
    "LossConfig",
    "LossValue",
    "delay_loss",
    "fa_loss",
    "cpd_loss",
    "bce_loss",
    "balanced_fa_weight",
]

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Weighting and truncation knobs for the detection objective.

    ``fa_weight`` balances the false-alarm term against the delay term.
    ``horizon_cap``, when set, truncates both loss sums as if every
    sequence ended at that step; it is the tunable horizon hyperparameter.
    """

    fa_weight: float = 1.0
    horizon_cap: Optional[int] = None

    def __post_init__(self):
        if not self.fa_weight > 0:
            raise ValueError(f"fa_weight must be positive, got {self.fa_weight}")
        if self.horizon_cap is not None and self.horizon_cap < 1:
            raise ValueError(f"horizon_cap must be >= 1, got {self.horizon_cap}")


@dataclass(frozen=True)
class LossValue:
    """Batch loss split into its two terms; ``total = delay + weight * fa``."""

    total: float
    delay_term: float
    fa_term: float


def _censored_stop_time(probs: np.ndarray, start: int, stop: int) -> Tuple[float, np.ndarray]:
    """Expected censored stopping time over the window ``[start, stop)``.

    Value: ``sum_{t=start}^{stop-1} (t-start) p_t prod_{k=start}^{t-1}(1-p_k)
    + (stop-start) prod_{k=start}^{stop-1}(1-p_k)``, i.e. the expectation of
    ``min(tau, stop) - start`` for a stopping rule restarted at ``start``.

    The gradient uses the tail recursion ``R_j = w_j p_j + (1-p_j) R_{j+1}``
    (with ``w_j`` the elapsed time and ``R_m`` the censor weight), giving
    ``d/dp_j = P_j (w_j - R_{j+1})`` where ``P_j`` is the survival prefix.
    No divisions, so entries equal to exactly 0 or 1 are safe.
    """
    grad = np.zeros(probs.shape[0])
    m = stop - start
    if m <= 0:
        return 0.0, grad
    w = probs[start:stop]
    weights = np.arange(m, dtype=np.float64)
    tail = np.empty(m + 1)
    tail[m] = float(m)
    for j in range(m - 1, -1, -1):
        tail[j] = weights[j] * w[j] + (1.0 - w[j]) * tail[j + 1]
    survival = np.empty(m)
    survival[0] = 1.0
    if m > 1:
        np.cumprod(1.0 - w[:-1], out=survival[1:])
    grad[start:stop] = survival * (weights - tail[1:])
    return float(tail[0]), grad


def _delay_with_grad(probs: np.ndarray, change_point: int, horizon: int) -> Tuple[float, np.ndarray]:
    return _censored_stop_time(probs, change_point, horizon)


def _fa_with_grad(probs: np.ndarray, change_point: int, horizon: int) -> Tuple[float, np.ndarray]:
    value, grad = _censored_stop_time(probs, 0, min(change_point, horizon))
    return -value, -grad


def delay_loss(p: ProbabilitySeries, change_point: int) -> Tuple[float, np.ndarray]:
    """Expected detection delay and its gradient with respect to ``p``.

    The value equals :func:`cpdkit.core.oracle_expected_delay` on the same
    input; the gradient is zero for steps before the change.  For a
    no-change sequence (``change_point == T``) both are identically zero.
    """
    horizon = p.length
    if not 0 <= change_point <= horizon:
        raise ValueError(f"change_point must be in [0, {horizon}], got {change_point}")
    return _delay_with_grad(p.probs, change_point, horizon)


def fa_loss(p: ProbabilitySeries, change_point: int) -> Tuple[float, np.ndarray]:
    """Negated expected censored alarm time and its gradient.

    With ``h = min(change_point, T)`` the value is
    ``-E[min(tau, h)]``; minimizing it maximizes the expected time to a
    false alarm on the change-free prefix.  Gradient entries at or after
    ``h`` are zero.
    """
    horizon = p.length
    if not 0 <= change_point <= horizon:
        raise ValueError(f"change_point must be in [0, {horizon}], got {change_point}")
    return _fa_with_grad(p.probs, change_point, horizon)


def cpd_loss(
    batch: Seq[Tuple[ProbabilitySeries, int]],
    config: LossConfig = LossConfig(),
) -> Tuple[LossValue, List[np.ndarray]]:
    """Batch detection objective: mean delay term plus weighted mean FA term.

    Returns the loss value (with both terms reported separately) and one
    gradient vector per batch entry, each already scaled by the 1/N batch
    averaging and the FA weight.  If ``config.horizon_cap`` is set, every
    sequence is treated as if it ended at that step.
    """
    if len(batch) == 0:
        raise ValueError("cpd_loss requires a non-empty batch")
    n = len(batch)
    delay_sum = 0.0
    fa_sum = 0.0
    grads: List[np.ndarray] = []
    for p, change_point in batch:
        horizon = p.length
        if not 0 <= change_point <= horizon:
            raise ValueError(f"change_point must be in [0, {horizon}], got {change_point}")
        if config.horizon_cap is not None:
            horizon = min(horizon, config.horizon_cap)
        dv, dg = _delay_with_grad(p.probs, change_point, horizon)
        fv, fg = _fa_with_grad(p.probs, change_point, horizon)
        delay_sum += dv
        fa_sum += fv
        grads.append((dg + config.fa_weight * fg) / n)
    delay_term = delay_sum / n
    fa_term = fa_sum / n
    total = delay_term + config.fa_weight * fa_term
    return LossValue(total=total, delay_term=delay_term, fa_term=fa_term), grads


def _bce_with_grad(probs: np.ndarray, change_point: int) -> Tuple[float, np.ndarray]:
    horizon = probs.shape[0]
    y = (np.arange(horizon) >= change_point).astype(np.float64)
    clamped = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    value = float(np.mean(-y * np.log(clamped) - (1.0 - y) * np.log1p(-clamped)))
    # Gradient of the clamped loss, passed through to the raw probabilities;
    # the clamp only binds within BCE_EPS of the boundary.
    grad = (clamped - y) / (clamped * (1.0 - clamped) * horizon)
    return value, grad


def bce_loss(p: ProbabilitySeries, change_point: int) -> Tuple[float, np.ndarray]:
    """Per-timestep binary cross-entropy against labels ``1[t >= change]``.

    Probabilities are clamped to ``[BCE_EPS, 1 - BCE_EPS]`` before the logs
    so exact 0/1 entries are safe.  The value is the mean over timesteps.
    """
    horizon = p.length
    if not 0 <= change_point <= horizon:
        raise ValueError(f"change_point must be in [0, {horizon}], got {change_point}")
    return _bce_with_grad(p.probs, change_point)


def balanced_fa_weight(
    batch: Seq[Tuple[ProbabilitySeries, int]],
    horizon_cap: Optional[int] = None,
) -> float:
    """FA weight that equalizes the magnitudes of the two loss terms.

    Computed on the given batch (typically the first training batch under
    the untrained model).  Falls back to 1.0 when either term is too close
    to zero for the ratio to be meaningful.
    """
    if len(batch) == 0:
        raise ValueError("balanced_fa_weight requires a non-empty batch")
    delay_sum = 0.0
    fa_sum = 0.0
    for p, change_point in batch:
        horizon = p.length if horizon_cap is None else min(p.length, horizon_cap)
        dv, _ = _delay_with_grad(p.probs, change_point, horizon)
        fv, _ = _fa_with_grad(p.probs, change_point, horizon)
        delay_sum += dv
        fa_sum += fv
    if abs(fa_sum) < 1e-12 or abs(delay_sum) < 1e-12:
        return 1.0
    return abs(delay_sum) / abs(fa_sum)

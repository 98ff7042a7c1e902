"""Shared domain types and brute-force stopping-time oracles.

Indexing convention used throughout the package: timesteps are 0-based,
``t in {0 .. T-1}``, a change point ``theta`` is the first abnormal index,
and ``theta == T`` is the no-change sentinel.  Alarm times follow the same
convention: ``tau == T`` means no alarm fired within the horizon.

The alarm model is an independent-Bernoulli stopping rule over a
probability series ``p``: at step ``t`` the alarm fires with probability
``p_t`` given that it has not fired earlier, so
``P(tau = t) = p_t * prod_{k<t} (1 - p_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "Sequence",
    "ChangeAnnotation",
    "ProbabilitySeries",
    "StoppingOutcome",
    "stopping_distribution",
    "oracle_expected_delay",
    "oracle_expected_alarm_time",
]


@dataclass(frozen=True)
class Sequence:
    """A T x d observation matrix with one d-dimensional row per timestep.

    The feature matrix is copied to float64 and stored read-only, so a
    Sequence behaves as an immutable value and is safe to share across
    threads.
    """

    id: str
    features: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, order="C")
        if feats.ndim != 2:
            raise ValueError(f"features must be a 2-d matrix, got ndim={feats.ndim}")
        if feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must have at least one row and column, got shape {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite values")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def length(self) -> int:
        """Number of timesteps T."""
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        """Feature dimension d."""
        return int(self.features.shape[1])


@dataclass(frozen=True)
class ChangeAnnotation:
    """Ground truth for one sequence: first abnormal index and change type.

    ``change_point == T`` (the sequence length) encodes "no change"; in that
    case ``change_type`` must be None.  The upper bound depends on the paired
    sequence, so it is checked by :meth:`validate_for` at pairing sites.
    """

    change_point: int
    change_type: Optional[int] = None

    def __post_init__(self):
        if self.change_point < 0:
            raise ValueError(f"change_point must be >= 0, got {self.change_point}")
        if self.change_type is not None and self.change_type < 1:
            raise ValueError(f"change_type must be a 1-based type index, got {self.change_type}")

    def is_change(self, horizon: int) -> bool:
        return self.change_point < horizon

    def validate_for(self, horizon: int) -> None:
        """Check the annotation against the paired sequence length."""
        if self.change_point > horizon:
            raise ValueError(
                f"change_point {self.change_point} exceeds sequence length {horizon}"
            )
        has_type = self.change_type is not None
        if self.is_change(horizon) != has_type:
            raise ValueError(
                "change_type must be present exactly when change_point < sequence length "
                f"(change_point={self.change_point}, horizon={horizon}, change_type={self.change_type})"
            )


@dataclass(frozen=True)
class ProbabilitySeries:
    """Per-timestep change probabilities, one entry per observation."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).ravel()
        if p.size < 1:
            raise ValueError("probability series must be non-empty")
        if not np.isfinite(p).all():
            raise ValueError("probabilities contain non-finite values")
        if (p < 0.0).any() or (p > 1.0).any():
            raise ValueError("probabilities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def length(self) -> int:
        return int(self.probs.shape[0])


@dataclass(frozen=True)
class StoppingOutcome:
    """First-alarm result for one sequence; ``alarm_time == T`` means silence."""

    alarm_time: int
    alarm_raised: bool

    def __post_init__(self):
        if self.alarm_time < 0:
            raise ValueError(f"alarm_time must be >= 0, got {self.alarm_time}")


def stopping_distribution(p: ProbabilitySeries) -> np.ndarray:
    """Distribution of the stopping time under the Bernoulli alarm model.

    Returns a vector ``q`` of length T+1 where ``q[t]`` is the probability
    of the first alarm at step t, and ``q[T]`` the probability of never
    alarming within the horizon.  The entries always sum to 1 up to float
    round-off (the products telescope).
    """
    probs = p.probs
    horizon = probs.shape[0]
    survival = np.empty(horizon + 1)
    survival[0] = 1.0
    np.cumprod(1.0 - probs, out=survival[1:])
    q = np.empty(horizon + 1)
    q[:horizon] = probs * survival[:horizon]
    q[horizon] = survival[horizon]
    return q


def oracle_expected_delay(p: ProbabilitySeries, change_point: int) -> float:
    """Expected detection delay, by literal enumeration of alarm outcomes.

    Only steps at or after the change are enumerated and the survival
    products restart at the change index, so alarms before the change do
    not enter.  A run that never alarms is charged the full remaining
    horizon ``T - change_point``.  This is the slow reference used to
    validate the closed-form delay loss; keep it dumb.
    """
    probs = p.probs
    horizon = probs.shape[0]
    if not 0 <= change_point <= horizon:
        raise ValueError(f"change_point must be in [0, {horizon}], got {change_point}")
    total = 0.0
    for t in range(change_point, horizon):
        survive = 1.0
        for k in range(change_point, t):
            survive *= 1.0 - probs[k]
        total += (t - change_point) * probs[t] * survive
    survive = 1.0
    for k in range(change_point, horizon):
        survive *= 1.0 - probs[k]
    total += (horizon - change_point) * survive
    return float(total)


def oracle_expected_alarm_time(p: ProbabilitySeries, horizon: int) -> float:
    """Expected alarm time censored at ``horizon``, by literal enumeration.

    Computes ``E[min(tau, horizon)]`` for the Bernoulli stopping model:
    the sum of ``t * P(tau = t)`` over ``t < horizon`` plus ``horizon``
    times the probability of surviving all steps before it.  Reference
    implementation for the false-alarm loss term.
    """
    probs = p.probs
    length = probs.shape[0]
    if not 0 <= horizon <= length:
        raise ValueError(f"horizon must be in [0, {length}], got {horizon}")
    total = 0.0
    for t in range(horizon):
        survive = 1.0
        for k in range(t):
            survive *= 1.0 - probs[k]
        total += t * probs[t] * survive
    survive = 1.0
    for k in range(horizon):
        survive *= 1.0 - probs[k]
    total += horizon * survive
    return float(total)

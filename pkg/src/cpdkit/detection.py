"""Thresholded online alarm rule plus classical reference detectors.

The probability detector alarms at the first step whose emitted
probability strictly exceeds the threshold.  The classical probes (CUSUM
and Shiryaev-Roberts) operate in the known-distribution, single-change-type
regime and serve as reference curves only; multivariate inputs are handled
as independent coordinates with summed log-likelihood ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .core import ProbabilitySeries, Sequence, StoppingOutcome
from .model import _LOGIT_CLIP, DetectorModel, _sigmoid, _views

__all__ = [
    "DetectorConfig",
    "ClassicalSpec",
    "detect",
    "StreamDetector",
    "cusum_probe",
    "shiryaev_roberts_probe",
]


@dataclass(frozen=True)
class DetectorConfig:
    """Alarm thresholds: probability threshold and classical statistic threshold."""

    threshold: float = 0.5
    statistic_threshold: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.statistic_threshold > 0:
            raise ValueError(
                f"statistic_threshold must be positive, got {self.statistic_threshold}"
            )


@dataclass(frozen=True)
class ClassicalSpec:
    """Known pre/post Gaussians for the classical probes."""

    kind: str
    pre_mean: np.ndarray
    post_mean: np.ndarray
    pre_scale: float
    post_scale: float

    def __post_init__(self):
        if self.kind not in ("cusum", "shiryaev-roberts"):
            raise ValueError(f"kind must be 'cusum' or 'shiryaev-roberts', got {self.kind!r}")
        pre = np.array(self.pre_mean, dtype=np.float64).ravel()
        post = np.array(self.post_mean, dtype=np.float64).ravel()
        if pre.shape != post.shape or pre.size < 1:
            raise ValueError("pre_mean and post_mean must be non-empty vectors of equal length")
        if not (self.pre_scale > 0 and self.post_scale > 0):
            raise ValueError("scales must be positive")
        if np.array_equal(pre, post) and self.pre_scale == self.post_scale:
            raise ValueError("pre and post regimes must differ")
        pre.setflags(write=False)
        post.setflags(write=False)
        object.__setattr__(self, "pre_mean", pre)
        object.__setattr__(self, "post_mean", post)


def detect(p: ProbabilitySeries, threshold: float) -> StoppingOutcome:
    """First step with probability strictly above the threshold.

    Returns ``alarm_time == T`` with ``alarm_raised == False`` when no step
    crosses.  The inequality is strict, so a probability exactly equal to
    the threshold does not alarm.
    """
    hits = np.nonzero(p.probs > threshold)[0]
    if hits.size:
        return StoppingOutcome(alarm_time=int(hits[0]), alarm_raised=True)
    return StoppingOutcome(alarm_time=p.length, alarm_raised=False)


class StreamDetector:
    """Stateful one-step-at-a-time alarm handle.

    Created either around a :class:`DetectorModel` (then :meth:`step` takes
    an observation row) or around a raw probability feed (then :meth:`step`
    takes a probability).  The alarm flag latches: once raised it stays
    raised until :meth:`reset`.  Feeding a sequence step by step produces
    bit-identical probabilities to the batch forward pass.

    Handles are single-owner objects; they may move between threads but
    must not be shared concurrently.
    """

    def __init__(
        self,
        threshold: float,
        model: Optional[DetectorModel] = None,
        horizon: Optional[int] = None,
    ):
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {threshold}")
        if horizon is not None and horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        self.threshold = threshold
        self.model = model
        self.horizon = horizon
        self.reset()

    def reset(self) -> None:
        """Clear recurrent state, the step counter and the latched alarm."""
        self._t = 0
        self._alarmed = False
        self._alarm_time: Optional[int] = None
        if self.model is not None:
            h = self.model.config.hidden_dim
            self._h = np.zeros((1, h))
            self._c = np.zeros((1, h)) if self.model.config.cell_kind == "lstm" else None

    @property
    def steps_taken(self) -> int:
        return self._t

    @property
    def alarm_time(self) -> Optional[int]:
        return self._alarm_time

    def step(self, value) -> Tuple[float, bool]:
        """Consume one observation (model mode) or probability (raw mode).

        Returns the probability emitted at this step and the latched alarm
        flag.  Raises once more steps are taken than the configured fixed
        horizon.
        """
        if self.horizon is not None and self._t >= self.horizon:
            raise RuntimeError(
                f"stream exceeded its fixed horizon of {self.horizon} steps; call reset()"
            )
        if self.model is not None:
            x = np.asarray(value, dtype=np.float64).reshape(1, -1)
            if x.shape[1] != self.model.config.input_dim:
                raise ValueError(
                    f"observation dim {x.shape[1]} does not match model input_dim "
                    f"{self.model.config.input_dim}"
                )
            prob, self._h, self._c = _model_step(self.model, x, self._h, self._c)
        else:
            prob = float(value)
            if not 0.0 <= prob <= 1.0 or not np.isfinite(prob):
                raise ValueError(f"probability must be in [0, 1], got {prob}")
        if not self._alarmed and prob > self.threshold:
            self._alarmed = True
            self._alarm_time = self._t
        self._t += 1
        return prob, self._alarmed


def _model_step(model: DetectorModel, x: np.ndarray, h: np.ndarray, c):
    """One recurrent step through the shared forward kernel."""
    # Run the batch kernel on a single step, seeding it with the carried
    # state via a crafted cache-free call path: reuse the cell equations by
    # calling the internal forward on one timestep with injected state.
    from .model import _views, _sigmoid, _LOGIT_CLIP  # local import to keep coupling explicit

    cfg = model.config
    v = _views(model.params, cfg)
    hd = cfg.hidden_dim
    z = x @ v["cell.wx"].T + h @ v["cell.wh"].T + v["cell.b"]
    if cfg.cell_kind == "lstm":
        gi = _sigmoid(z[:, :hd])
        gf = _sigmoid(z[:, hd : 2 * hd])
        gc = np.tanh(z[:, 2 * hd : 3 * hd])
        go = _sigmoid(z[:, 3 * hd :])
        c_new = gf * c + gi * gc
        h_new = go * np.tanh(c_new)
    else:
        gu = _sigmoid(z[:, :hd])
        gc = np.tanh(z[:, hd:])
        h_new = (1.0 - gu) * h + gu * gc
        c_new = None
    a1 = np.maximum(h_new @ v["fc1.w"].T + v["fc1.b"], 0.0)
    a2 = np.maximum(a1 @ v["fc2.w"].T + v["fc2.b"], 0.0)
    logit = np.clip((a2 @ v["out.w"].T + v["out.b"])[:, 0], -_LOGIT_CLIP, _LOGIT_CLIP)
    return float(_sigmoid(logit)[0]), h_new, c_new


def _log_likelihood_ratios(seq: Sequence, spec: ClassicalSpec) -> np.ndarray:
    """Per-step log LR of post vs pre, coordinates treated independently."""
    if seq.dim != spec.pre_mean.shape[0]:
        raise ValueError(
            f"sequence dim {seq.dim} does not match spec dim {spec.pre_mean.shape[0]}"
        )
    x = seq.features
    pre_var = spec.pre_scale**2
    post_var = spec.post_scale**2
    llr = (
        ((x - spec.pre_mean) ** 2).sum(axis=1) / (2.0 * pre_var)
        - ((x - spec.post_mean) ** 2).sum(axis=1) / (2.0 * post_var)
        + seq.dim * np.log(spec.pre_scale / spec.post_scale)
    )
    return llr


def cusum_probe(
    seq: Sequence, spec: ClassicalSpec, statistic_threshold: float
) -> Tuple[StoppingOutcome, np.ndarray]:
    """One-sided CUSUM recursion ``S_t = max(0, S_{t-1} + llr_t)``.

    Alarms at the first step with ``S_t > h`` (strict) and returns the full
    statistic trace for plotting.  The statistic is nonnegative by
    construction.
    """
    if statistic_threshold < 0:
        raise ValueError(f"statistic_threshold must be >= 0, got {statistic_threshold}")
    llr = _log_likelihood_ratios(seq, spec)
    trace = np.empty(seq.length)
    stat = 0.0
    alarm: Optional[int] = None
    for t in range(seq.length):
        stat = max(0.0, stat + llr[t])
        trace[t] = stat
        if alarm is None and stat > statistic_threshold:
            alarm = t
    if alarm is None:
        return StoppingOutcome(alarm_time=seq.length, alarm_raised=False), trace
    return StoppingOutcome(alarm_time=alarm, alarm_raised=True), trace


def shiryaev_roberts_probe(
    seq: Sequence, spec: ClassicalSpec, statistic_threshold: float
) -> Tuple[StoppingOutcome, np.ndarray]:
    """Shiryaev-Roberts recursion ``R_t = (1 + R_{t-1}) * LR_t``, in log domain.

    Alarms at the first ``R_t > A``.  The returned trace holds ``log R_t``,
    which stays finite for finite inputs even when ``R_t`` itself would
    overflow.
    """
    if statistic_threshold < 0:
        raise ValueError(f"statistic_threshold must be >= 0, got {statistic_threshold}")
    llr = _log_likelihood_ratios(seq, spec)
    log_threshold = np.log(statistic_threshold) if statistic_threshold > 0 else -np.inf
    trace = np.empty(seq.length)
    log_stat = -np.inf
    alarm: Optional[int] = None
    for t in range(seq.length):
        log_stat = np.logaddexp(0.0, log_stat) + llr[t]
        trace[t] = log_stat
        if alarm is None and log_stat > log_threshold:
            alarm = t
    if alarm is None:
        return StoppingOutcome(alarm_time=seq.length, alarm_raised=False), trace
    return StoppingOutcome(alarm_time=alarm, alarm_raised=True), trace

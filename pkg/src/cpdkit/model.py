"""Recurrent change-probability detector with hand-rolled backprop.

The network is a single recurrent cell (a standard gated cell with a
memory carry by default, or a lighter single-gate variant for debugging)
followed by two fully-connected ReLU layers and a sigmoid output emitting
one change probability per timestep.  The emitted probability at step t
depends only on observations up to t, so the detector is usable online.

All parameters live in one flat float64 vector; the layout is fixed by the
model config (see ``parameter_layout``) and is the order used by the model
file format.  Forward, backward-through-time and the SGD loop are written
directly against numpy so gradients can be validated against finite
differences without a framework in the way.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from .core import ChangeAnnotation, ProbabilitySeries, Sequence
from .losses import LossConfig, _bce_with_grad, _delay_with_grad, _fa_with_grad

__all__ = [
    "ModelConfig",
    "DetectorModel",
    "TrainConfig",
    "TrainLogEntry",
    "parameter_layout",
    "param_count",
    "init_model",
    "forward",
    "forward_many",
    "backward",
    "train",
    "save_model",
    "load_model",
    "ModelFileError",
]

CELL_KINDS = ("lstm", "simple")
OPTIMIZERS = ("sgd", "momentum", "adam")

MODEL_MAGIC = b"CPDKIT-MODEL"
MODEL_FORMAT_VERSION = 1

# Keeps sigmoid outputs strictly inside (0, 1) in float64.
_LOGIT_CLIP = 36.0


class ModelFileError(ValueError):
    """Raised when a model file cannot be parsed; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description: input width, cell size, head sizes, cell kind."""

    input_dim: int
    hidden_dim: int = 32
    fc_dims: Tuple[int, int] = (16, 16)
    cell_kind: str = "lstm"

    def __post_init__(self):
        object.__setattr__(self, "fc_dims", tuple(int(x) for x in self.fc_dims))
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be >= 1")
        if len(self.fc_dims) != 2 or any(x < 1 for x in self.fc_dims):
            raise ValueError(f"fc_dims must be two positive integers, got {self.fc_dims}")
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")

    @property
    def gate_count(self) -> int:
        return 4 if self.cell_kind == "lstm" else 2


def parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Names and shapes of all parameter blocks, in flat-vector order."""
    g = config.gate_count
    h = config.hidden_dim
    d = config.input_dim
    f1, f2 = config.fc_dims
    return [
        ("cell.wx", (g * h, d)),
        ("cell.wh", (g * h, h)),
        ("cell.b", (g * h,)),
        ("fc1.w", (f1, h)),
        ("fc1.b", (f1,)),
        ("fc2.w", (f2, f1)),
        ("fc2.b", (f2,)),
        ("out.w", (1, f2)),
        ("out.b", (1,)),
    ]


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_layout(config))


def _views(params: np.ndarray, config: ModelConfig) -> Dict[str, np.ndarray]:
    """Named views into the flat parameter (or gradient) vector."""
    out: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in parameter_layout(config):
        size = int(np.prod(shape))
        out[name] = params[offset : offset + size].reshape(shape)
        offset += size
    return out


@dataclass(frozen=True)
class DetectorModel:
    """Immutable bundle of an architecture config and its flat weights."""

    config: ModelConfig
    params: np.ndarray

    def __post_init__(self):
        flat = np.array(self.params, dtype=np.float64).ravel()
        expected = param_count(self.config)
        if flat.shape[0] != expected:
            raise ValueError(
                f"parameter vector has {flat.shape[0]} entries, config requires {expected}"
            )
        if not np.isfinite(flat).all():
            raise ValueError("parameters contain non-finite values")
        flat.setflags(write=False)
        object.__setattr__(self, "params", flat)


def init_model(config: ModelConfig, seed) -> DetectorModel:
    """Seeded initialization: uniform weights in [-1/sqrt(H), 1/sqrt(H)],
    zero biases, and (for the memory cell) forget-gate bias 1.0."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(config))
    views = _views(flat, config)
    bound = 1.0 / np.sqrt(config.hidden_dim)
    for name, shape in parameter_layout(config):
        if len(shape) == 2:
            views[name][...] = rng.uniform(-bound, bound, size=shape)
    if config.cell_kind == "lstm":
        h = config.hidden_dim
        views["cell.b"][h : 2 * h] = 1.0
    return DetectorModel(config=config, params=flat)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def _forward_batch(
    config: ModelConfig,
    params: np.ndarray,
    inputs: np.ndarray,
    need_cache: bool,
) -> Tuple[np.ndarray, Optional[list]]:
    """Run the network over a (B, T, d) batch; returns (B, T) probabilities.

    With ``need_cache`` the per-step activations are kept for
    ``_backward_batch``.
    """
    v = _views(params, config)
    batch, steps, _ = inputs.shape
    h_dim = config.hidden_dim
    lstm = config.cell_kind == "lstm"
    h = np.zeros((batch, h_dim))
    c = np.zeros((batch, h_dim)) if lstm else None
    probs = np.empty((batch, steps))
    cache: Optional[list] = [] if need_cache else None
    wx_t = v["cell.wx"].T
    wh_t = v["cell.wh"].T
    for t in range(steps):
        x = inputs[:, t, :]
        z = x @ wx_t + h @ wh_t + v["cell.b"]
        if lstm:
            gi = _sigmoid(z[:, :h_dim])
            gf = _sigmoid(z[:, h_dim : 2 * h_dim])
            gc = np.tanh(z[:, 2 * h_dim : 3 * h_dim])
            go = _sigmoid(z[:, 3 * h_dim :])
            c_new = gf * c + gi * gc
            tc = np.tanh(c_new)
            h_new = go * tc
        else:
            gu = _sigmoid(z[:, :h_dim])
            gc = np.tanh(z[:, h_dim:])
            h_new = (1.0 - gu) * h + gu * gc
        a1 = np.maximum(h_new @ v["fc1.w"].T + v["fc1.b"], 0.0)
        a2 = np.maximum(a1 @ v["fc2.w"].T + v["fc2.b"], 0.0)
        logit = np.clip((a2 @ v["out.w"].T + v["out.b"])[:, 0], -_LOGIT_CLIP, _LOGIT_CLIP)
        probs[:, t] = _sigmoid(logit)
        if need_cache:
            if lstm:
                cache.append((x, h, c, gi, gf, gc, go, c_new, tc, h_new, a1, a2))
            else:
                cache.append((x, h, gu, gc, h_new, a1, a2))
        h = h_new
        if lstm:
            c = c_new
    return probs, cache


def _backward_batch(
    config: ModelConfig,
    params: np.ndarray,
    probs: np.ndarray,
    cache: list,
    upstream: np.ndarray,
) -> np.ndarray:
    """Reverse-mode sweep through the cached forward pass.

    ``upstream`` is dLoss/dprobs of shape (B, T); the result is the flat
    parameter gradient summed over the batch rows.
    """
    v = _views(params, config)
    grads = np.zeros_like(params)
    gv = _views(grads, config)
    batch, steps = probs.shape
    h_dim = config.hidden_dim
    lstm = config.cell_kind == "lstm"
    dh_carry = np.zeros((batch, h_dim))
    dc_carry = np.zeros((batch, h_dim)) if lstm else None
    for t in range(steps - 1, -1, -1):
        if lstm:
            x, h_prev, c_prev, gi, gf, gc, go, c_new, tc, h_new, a1, a2 = cache[t]
        else:
            x, h_prev, gu, gc, h_new, a1, a2 = cache[t]
        p = probs[:, t]
        dlogit = upstream[:, t] * p * (1.0 - p)
        gv["out.w"] += dlogit[np.newaxis, :] @ a2
        gv["out.b"] += dlogit.sum()
        da2 = np.outer(dlogit, v["out.w"][0])
        da2 *= a2 > 0.0
        gv["fc2.w"] += da2.T @ a1
        gv["fc2.b"] += da2.sum(axis=0)
        da1 = da2 @ v["fc2.w"]
        da1 *= a1 > 0.0
        gv["fc1.w"] += da1.T @ h_new
        gv["fc1.b"] += da1.sum(axis=0)
        dh = dh_carry + da1 @ v["fc1.w"]
        if lstm:
            do = dh * tc
            dc = dc_carry + dh * go * (1.0 - tc * tc)
            di = dc * gc
            df = dc * c_prev
            dg = dc * gi
            dz = np.concatenate(
                [
                    di * gi * (1.0 - gi),
                    df * gf * (1.0 - gf),
                    dg * (1.0 - gc * gc),
                    do * go * (1.0 - go),
                ],
                axis=1,
            )
            dh_carry = dz @ v["cell.wh"]
            dc_carry = dc * gf
        else:
            du = dh * (gc - h_prev)
            dg = dh * gu
            dz = np.concatenate([du * gu * (1.0 - gu), dg * (1.0 - gc * gc)], axis=1)
            dh_carry = dz @ v["cell.wh"] + dh * (1.0 - gu)
        gv["cell.wx"] += dz.T @ x
        gv["cell.wh"] += dz.T @ h_prev
        gv["cell.b"] += dz.sum(axis=0)
    return grads


def forward(model: DetectorModel, seq: Sequence) -> ProbabilitySeries:
    """Emit one change probability per timestep (strictly inside (0, 1)).

    The probability at step t is a function of rows 0..t only.
    """
    if seq.dim != model.config.input_dim:
        raise ValueError(
            f"sequence dim {seq.dim} does not match model input_dim {model.config.input_dim}"
        )
    probs, _ = _forward_batch(model.config, model.params, seq.features[np.newaxis], False)
    return ProbabilitySeries(probs[0])


def forward_many(
    model: DetectorModel, seqs: Seq[Sequence], batch_size: int = 256
) -> List[ProbabilitySeries]:
    """Batched inference over many sequences; one result per input, in order."""
    by_length: Dict[int, List[int]] = {}
    for i, seq in enumerate(seqs):
        if seq.dim != model.config.input_dim:
            raise ValueError(
                f"sequence {seq.id!r} dim {seq.dim} does not match model input_dim "
                f"{model.config.input_dim}"
            )
        by_length.setdefault(seq.length, []).append(i)
    results: List[Optional[ProbabilitySeries]] = [None] * len(seqs)
    for length in sorted(by_length):
        indices = by_length[length]
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            stacked = np.stack([seqs[i].features for i in chunk])
            probs, _ = _forward_batch(model.config, model.params, stacked, False)
            for row, i in enumerate(chunk):
                results[i] = ProbabilitySeries(probs[row])
    return results  # type: ignore[return-value]


def backward(model: DetectorModel, seq: Sequence, upstream: np.ndarray) -> np.ndarray:
    """Parameter gradient for one sequence given dLoss/dprobs."""
    if seq.dim != model.config.input_dim:
        raise ValueError(
            f"sequence dim {seq.dim} does not match model input_dim {model.config.input_dim}"
        )
    up = np.asarray(upstream, dtype=np.float64).ravel()
    if up.shape[0] != seq.length:
        raise ValueError(f"upstream gradient must have length {seq.length}, got {up.shape[0]}")
    probs, cache = _forward_batch(model.config, model.params, seq.features[np.newaxis], True)
    return _backward_batch(model.config, model.params, probs, cache, up[np.newaxis])


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters; the seed fixes initialization and batch order."""

    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    optimizer: str = "sgd"
    seed: int = 0
    grad_clip: Optional[float] = 5.0

    def __post_init__(self):
        # learning_rate 0 is allowed as an explicit no-op optimizer.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be an unsigned integer, got {self.seed}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")


@dataclass(frozen=True)
class TrainLogEntry:
    """Dataset-mean loss after one epoch; term split only for the detection loss."""

    epoch: int
    loss: float
    delay_term: Optional[float] = None
    fa_term: Optional[float] = None


def train(
    dataset: Seq[Tuple[Sequence, ChangeAnnotation]],
    loss_kind: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
) -> Tuple[DetectorModel, List[TrainLogEntry]]:
    """Minibatch SGD against the chosen loss; fully deterministic per seed.

    Returns the trained model and a per-epoch log of dataset-mean losses.
    Aborts with a diagnostic naming the epoch and batch if the loss or
    gradient goes non-finite.
    """
    if loss_kind not in ("cpd", "bce"):
        raise ValueError(f"loss_kind must be 'cpd' or 'bce', got {loss_kind!r}")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if loss_cfg is None:
        loss_cfg = LossConfig()
    features: List[np.ndarray] = []
    change_points: List[int] = []
    for seq, ann in dataset:
        if seq.dim != model_cfg.input_dim:
            raise ValueError(
                f"sequence {seq.id!r} dim {seq.dim} does not match model input_dim "
                f"{model_cfg.input_dim}"
            )
        ann.validate_for(seq.length)
        features.append(seq.features)
        change_points.append(ann.change_point)

    root = np.random.SeedSequence(train_cfg.seed)
    init_ss, order_ss = root.spawn(2)
    params = init_model(model_cfg, init_ss).params.copy()
    shuffle_rng = np.random.default_rng(order_ss)

    velocity = np.zeros_like(params)
    adam_m = np.zeros_like(params)
    adam_v = np.zeros_like(params)
    adam_step = 0

    n = len(dataset)
    cpd = loss_kind == "cpd"
    log: List[TrainLogEntry] = []
    for epoch in range(train_cfg.epochs):
        perm = shuffle_rng.permutation(n)
        total_sum = 0.0
        delay_sum = 0.0
        fa_sum = 0.0
        for batch_no, start in enumerate(range(0, n, train_cfg.batch_size)):
            batch_idx = perm[start : start + train_cfg.batch_size]
            b = batch_idx.shape[0]
            by_length: Dict[int, List[int]] = {}
            for i in batch_idx:
                by_length.setdefault(features[i].shape[0], []).append(int(i))
            grad = np.zeros_like(params)
            batch_loss = 0.0
            for length in sorted(by_length):
                group = by_length[length]
                stacked = np.stack([features[i] for i in group])
                probs, cache = _forward_batch(model_cfg, params, stacked, True)
                upstream = np.empty_like(probs)
                for row, i in enumerate(group):
                    theta = change_points[i]
                    if cpd:
                        horizon = length
                        if loss_cfg.horizon_cap is not None:
                            horizon = min(horizon, loss_cfg.horizon_cap)
                        dv, dg = _delay_with_grad(probs[row], theta, horizon)
                        fv, fg = _fa_with_grad(probs[row], theta, horizon)
                        value = dv + loss_cfg.fa_weight * fv
                        upstream[row] = dg + loss_cfg.fa_weight * fg
                        delay_sum += dv
                        fa_sum += fv
                    else:
                        value, g = _bce_with_grad(probs[row], theta)
                        upstream[row] = g
                    batch_loss += value
                    total_sum += value
                upstream /= b
                grad += _backward_batch(model_cfg, params, probs, cache, upstream)
            batch_loss /= b
            if not np.isfinite(batch_loss) or not np.isfinite(grad).all():
                ids = ", ".join(dataset[i][0].id for i in batch_idx[:4])
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_no} "
                    f"(first sequences: {ids})"
                )
            if train_cfg.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > train_cfg.grad_clip:
                    grad *= train_cfg.grad_clip / norm
            if train_cfg.optimizer == "sgd":
                params -= train_cfg.learning_rate * grad
            elif train_cfg.optimizer == "momentum":
                velocity *= 0.9
                velocity += grad
                params -= train_cfg.learning_rate * velocity
            else:
                adam_step += 1
                adam_m *= 0.9
                adam_m += 0.1 * grad
                adam_v *= 0.999
                adam_v += 0.001 * grad * grad
                m_hat = adam_m / (1.0 - 0.9**adam_step)
                v_hat = adam_v / (1.0 - 0.999**adam_step)
                params -= train_cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
        if cpd:
            log.append(
                TrainLogEntry(
                    epoch=epoch,
                    loss=total_sum / n,
                    delay_term=delay_sum / n,
                    fa_term=fa_sum / n,
                )
            )
        else:
            log.append(TrainLogEntry(epoch=epoch, loss=total_sum / n))
    return DetectorModel(config=model_cfg, params=params), log


def save_model(model: DetectorModel, path) -> None:
    """Write the model container: magic, format version, config, raw weights.

    Weights are little-endian float64 in ``parameter_layout`` order.
    """
    header = {
        "input_dim": model.config.input_dim,
        "hidden_dim": model.config.hidden_dim,
        "fc_dims": list(model.config.fc_dims),
        "cell_kind": model.config.cell_kind,
        "param_count": int(model.params.shape[0]),
    }
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + b"\n")
        fh.write(struct.pack("<i", MODEL_FORMAT_VERSION))
        config_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<i", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(model.params.astype("<f8").tobytes())


def load_model(path) -> DetectorModel:
    """Read a model container written by :func:`save_model`.

    Raises :class:`ModelFileError` with a byte offset on any malformed or
    truncated content, and an unsupported-version error on a format-version
    mismatch; never returns a partially-built model.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    magic_len = len(MODEL_MAGIC) + 1
    if blob[:magic_len] != MODEL_MAGIC + b"\n":
        raise ModelFileError("bad magic string, not a model file", offset=0)
    offset = magic_len
    if len(blob) < offset + 8:
        raise ModelFileError("truncated header", offset=len(blob))
    (version,) = struct.unpack_from("<i", blob, offset)
    if version != MODEL_FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})",
            offset=offset,
        )
    offset += 4
    (config_len,) = struct.unpack_from("<i", blob, offset)
    offset += 4
    if config_len < 2 or len(blob) < offset + config_len:
        raise ModelFileError("truncated config block", offset=offset)
    try:
        header = json.loads(blob[offset : offset + config_len].decode("utf-8"))
        config = ModelConfig(
            input_dim=int(header["input_dim"]),
            hidden_dim=int(header["hidden_dim"]),
            fc_dims=tuple(int(x) for x in header["fc_dims"]),
            cell_kind=str(header["cell_kind"]),
        )
        declared = int(header["param_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFileError(f"invalid config block: {exc}", offset=offset) from exc
    offset += config_len
    expected = param_count(config)
    if declared != expected:
        raise ModelFileError(
            f"declared param_count {declared} does not match config ({expected})",
            offset=offset,
        )
    body = blob[offset:]
    if len(body) != 8 * expected:
        raise ModelFileError(
            f"parameter block has {len(body)} bytes, expected {8 * expected}",
            offset=offset,
        )
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return DetectorModel(config=config, params=params)

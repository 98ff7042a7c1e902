"""Synthetic multi-regime sequence generation and dataset file I/O.

Each change type is a pair of isotropic Gaussians (pre-change and
post-change).  An abnormal sequence has three segments: pre-change draws,
a short transition whose mean interpolates linearly between the two
regimes, and post-change draws.  The change point is the first transition
index, i.e. the earliest step whose distribution deviates from the
pre-change regime.  Normal sequences draw every row from the pre-change
regime of their type.

Datasets are stored as UTF-8 JSON lines, one record per sequence, with
fields ``id``, ``dim``, ``length``, ``change_point``, ``change_type``
(absent for normal sequences) and ``features`` (row-major).  The format is
self-describing, so externally produced files (for example embedded image
sequences) can be ingested through :func:`read_dataset`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np

from .core import ChangeAnnotation, Sequence

__all__ = [
    "GaussianSpec",
    "RegimeSpec",
    "DatasetSpec",
    "DatasetFormatError",
    "default_regime",
    "generate_sequence",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

# Digit pairs used for default change-type labels, mirroring the classic
# swap-pair catalog (each pair contributes a forward and a reverse type).
_LABEL_DIGITS = ((4, 7), (1, 9), (2, 5), (0, 8), (3, 6))


class DatasetFormatError(ValueError):
    """Raised on malformed dataset files; the message cites the line number."""


@dataclass(frozen=True)
class GaussianSpec:
    """Isotropic Gaussian: mean vector and a single positive scale."""

    mean: np.ndarray
    scale: float

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        if mean.size < 1 or not np.isfinite(mean).all():
            raise ValueError("mean must be a non-empty finite vector")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)


@dataclass(frozen=True)
class RegimeSpec:
    """Catalog of change types plus the shared sequence geometry."""

    change_types: Tuple[Tuple[GaussianSpec, GaussianSpec], ...]
    dim: int
    sequence_length: int = 64
    transition_length_range: Tuple[int, int] = (1, 10)
    type_labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "change_types", tuple(tuple(pair) for pair in self.change_types))
        if len(self.change_types) < 1:
            raise ValueError("at least one change type is required")
        for k, (pre, post) in enumerate(self.change_types, start=1):
            if pre.mean.shape[0] != self.dim or post.mean.shape[0] != self.dim:
                raise ValueError(f"change type {k}: mean dimension does not match dim={self.dim}")
            if np.array_equal(pre.mean, post.mean) and pre.scale == post.scale:
                raise ValueError(f"change type {k}: pre and post regimes are identical")
        lo, hi = self.transition_length_range
        if not (1 <= lo <= hi <= self.sequence_length - 2):
            raise ValueError(
                f"transition_length_range {self.transition_length_range} must lie within "
                f"[1, {self.sequence_length - 2}]"
            )
        if self.type_labels is not None and len(self.type_labels) != len(self.change_types):
            raise ValueError("type_labels must match the number of change types")

    @property
    def num_types(self) -> int:
        return len(self.change_types)

    def label(self, change_type: int) -> str:
        if self.type_labels is not None:
            return self.type_labels[change_type - 1]
        return f"type-{change_type}"


@dataclass(frozen=True)
class DatasetSpec:
    """How many sequences to draw per type, and the master seed."""

    regime: RegimeSpec
    sequences_per_type: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.sequences_per_type < 1:
            raise ValueError(f"sequences_per_type must be >= 1, got {self.sequences_per_type}")
        if self.seed < 0:
            raise ValueError(f"seed must be an unsigned integer, got {self.seed}")


def default_regime(
    num_types: int,
    dim: int = 2,
    sigma: float = 1.0,
    separation: Optional[float] = None,
    sequence_length: int = 64,
    transition_length_range: Tuple[int, int] = (1, 10),
) -> RegimeSpec:
    """Build a change-type catalog of anchor pairs.

    Types come in swap pairs: type 2j-1 morphs anchor A_j -> B_j and type 2j
    morphs back B_j -> A_j, so the post-change regime of one type is the
    pre-change regime of another.  Pair centers sit on a circle (first two
    coordinates) whose radius is fixed, so larger catalogs crowd the space
    and the detection problem genuinely gets harder with ``num_types``.

    ``separation`` is the within-pair mean distance; it defaults to
    ``2 * sigma``.
    """
    if num_types < 1:
        raise ValueError(f"num_types must be >= 1, got {num_types}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if separation is None:
        separation = 2.0 * sigma
    if not separation > 0:
        raise ValueError(f"separation must be positive, got {separation}")
    n_pairs = (num_types + 1) // 2
    radius = 4.0 * sigma
    anchors: List[Tuple[np.ndarray, np.ndarray]] = []
    for j in range(n_pairs):
        center = np.zeros(dim)
        if dim == 1:
            center[0] = radius * j
            offset = np.array([separation / 2.0])
        else:
            angle = 2.0 * np.pi * j / max(n_pairs, 5)
            center[0] = radius * np.cos(angle)
            center[1] = radius * np.sin(angle)
            tangent = np.zeros(dim)
            tangent[0] = -np.sin(angle)
            tangent[1] = np.cos(angle)
            offset = (separation / 2.0) * tangent
        anchors.append((center - offset, center + offset))
    types: List[Tuple[GaussianSpec, GaussianSpec]] = []
    labels: List[str] = []
    for k in range(num_types):
        j = k // 2
        a, b = anchors[j]
        if j < len(_LABEL_DIGITS):
            x, y = _LABEL_DIGITS[j]
        else:
            x, y = f"a{j}", f"b{j}"
        if k % 2 == 0:
            types.append((GaussianSpec(a, sigma), GaussianSpec(b, sigma)))
            labels.append(f"{x}->{y}")
        else:
            types.append((GaussianSpec(b, sigma), GaussianSpec(a, sigma)))
            labels.append(f"{y}->{x}")
    return RegimeSpec(
        change_types=tuple(types),
        dim=dim,
        sequence_length=sequence_length,
        transition_length_range=transition_length_range,
        type_labels=tuple(labels),
    )


def generate_sequence(
    regime: RegimeSpec,
    change_type: int,
    abnormal: bool,
    seed,
    seq_id: Optional[str] = None,
) -> Tuple[Sequence, ChangeAnnotation]:
    """Draw one sequence of the given type; deterministic for a fixed seed.

    Abnormal sequences get a pre segment, a transition of random length L
    drawn from the configured range (mean interpolation weights j/(L+1) for
    j = 1..L), and a post segment; the change point is the first transition
    index.  The pre-segment length is uniform on [T/4, 3T/4 - L], keeping
    changes away from the sequence edges.
    """
    if not 1 <= change_type <= regime.num_types:
        raise ValueError(f"change_type must be in [1, {regime.num_types}], got {change_type}")
    rng = np.random.default_rng(seed)
    length = regime.sequence_length
    dim = regime.dim
    pre, post = regime.change_types[change_type - 1]
    if seq_id is None:
        seq_id = f"type{change_type}-{'abn' if abnormal else 'nrm'}"
    if not abnormal:
        noise = rng.standard_normal((length, dim))
        features = pre.mean + pre.scale * noise
        return Sequence(id=seq_id, features=features), ChangeAnnotation(length, None)
    lo, hi = regime.transition_length_range
    trans_len = int(rng.integers(lo, hi + 1))
    a_min = max(1, length // 4)
    a_max = (3 * length) // 4 - trans_len
    if a_min > a_max:
        raise ValueError(
            f"infeasible segment lengths: pre-segment range [{a_min}, {a_max}] is empty "
            f"for sequence_length={length}, transition={trans_len}"
        )
    theta = int(rng.integers(a_min, a_max + 1))
    means = np.empty((length, dim))
    scales = np.empty(length)
    means[:theta] = pre.mean
    scales[:theta] = pre.scale
    for j in range(1, trans_len + 1):
        alpha = j / (trans_len + 1)
        means[theta + j - 1] = (1.0 - alpha) * pre.mean + alpha * post.mean
        scales[theta + j - 1] = (1.0 - alpha) * pre.scale + alpha * post.scale
    means[theta + trans_len :] = post.mean
    scales[theta + trans_len :] = post.scale
    noise = rng.standard_normal((length, dim))
    features = means + scales[:, np.newaxis] * noise
    return Sequence(id=seq_id, features=features), ChangeAnnotation(theta, change_type)


def generate_dataset(spec: DatasetSpec) -> List[Tuple[Sequence, ChangeAnnotation]]:
    """Balanced dataset: per type, N abnormal plus N normal sequences.

    Normal sequences of type k draw from type k's pre-change regime.  Every
    sequence gets an independently spawned seed, so generation could run in
    parallel and still match serial output; the final order is a seeded
    shuffle.
    """
    regime = spec.regime
    per_type = spec.sequences_per_type
    total = 2 * regime.num_types * per_type
    children = np.random.SeedSequence(spec.seed).spawn(total + 1)
    entries: List[Tuple[Sequence, ChangeAnnotation]] = []
    next_child = 0
    for k in range(1, regime.num_types + 1):
        for i in range(per_type):
            entries.append(
                generate_sequence(
                    regime, k, True, children[next_child], seq_id=f"t{k}-abn-{i:04d}"
                )
            )
            next_child += 1
        for i in range(per_type):
            entries.append(
                generate_sequence(
                    regime, k, False, children[next_child], seq_id=f"t{k}-nrm-{i:04d}"
                )
            )
            next_child += 1
    shuffle_rng = np.random.default_rng(children[-1])
    perm = shuffle_rng.permutation(total)
    return [entries[int(j)] for j in perm]


def write_dataset(dataset: Seq[Tuple[Sequence, ChangeAnnotation]], path) -> None:
    """Write JSON-lines records; float64 values round-trip exactly."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for seq, ann in dataset:
            ann.validate_for(seq.length)
            record = {
                "id": seq.id,
                "dim": seq.dim,
                "length": seq.length,
                "change_point": ann.change_point,
            }
            if ann.change_type is not None:
                record["change_type"] = ann.change_type
            record["features"] = seq.features.ravel().tolist()
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_dataset(path) -> List[Tuple[Sequence, ChangeAnnotation]]:
    """Parse a JSON-lines dataset file.

    Any malformed record raises :class:`DatasetFormatError` naming the line;
    nothing is returned partially.  All records must share one feature
    dimension.
    """
    path = Path(path)
    out: List[Tuple[Sequence, ChangeAnnotation]] = []
    expected_dim: Optional[int] = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            try:
                seq_id = str(record["id"])
                dim = int(record["dim"])
                length = int(record["length"])
                change_point = int(record["change_point"])
                change_type = record.get("change_type")
                flat = np.asarray(record["features"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: bad record: {exc}") from exc
            if dim < 1 or length < 1:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: dim and length must be positive"
                )
            if expected_dim is None:
                expected_dim = dim
            elif dim != expected_dim:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: dim {dim} is inconsistent with earlier records "
                    f"({expected_dim})"
                )
            if flat.size != dim * length:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: features has {flat.size} values, "
                    f"expected {dim * length}"
                )
            try:
                seq = Sequence(id=seq_id, features=flat.reshape(length, dim))
                ann = ChangeAnnotation(
                    change_point, int(change_type) if change_type is not None else None
                )
                ann.validate_for(length)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
            out.append((seq, ann))
    return out

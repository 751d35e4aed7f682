"""Feature ingestion, the simulated oracle and pool bookkeeping."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyPoolError, FormatError, PreconditionError, ValidationError

MAGIC = b"FEAT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    ids: np.ndarray
    true_labels: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
            raise ValidationError(f"features must be a non-empty 2-d matrix, got shape {feats.shape}")
        bad = ~np.isfinite(feats).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite feature value in row {int(np.flatnonzero(bad)[0])}")
        ids = np.asarray(self.ids)
        if ids.shape != (feats.shape[0],):
            raise ValidationError("ids must have one entry per row")
        labels = self.true_labels
        num_classes = int(self.num_classes)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise ValidationError("true_labels must have one entry per row")
            if num_classes <= 0:
                num_classes = int(labels.max()) + 1
            out = (labels < 0) | (labels >= num_classes)
            if out.any():
                row = int(np.flatnonzero(out)[0])
                raise ValidationError(f"label {labels[row]} out of range [0, {num_classes}) in row {row}")
            labels.setflags(write=False)
        feats.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "true_labels", labels)
        object.__setattr__(self, "num_classes", num_classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_arrays(cls, features, labels=None, num_classes=0) -> "FeatureSet":
        features = np.asarray(features, dtype=np.float64)
        return cls(features, np.arange(features.shape[0]), labels, num_classes)


# ---------------------------------------------------------------------------
# File formats


def write_binary(fs: FeatureSet, path) -> None:
    has_labels = fs.true_labels is not None
    header = _HEADER.pack(MAGIC, VERSION, fs.n, fs.dim, int(has_labels), fs.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(fs.true_labels, dtype="<u4").tobytes())


def read_binary(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, label_flag, num_classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if label_flag not in (0, 1):
        raise FormatError(f"{path}: label_flag must be 0 or 1, got {label_flag}")
    expected = _HEADER.size + 4 * n * d + 4 * n * label_flag
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = None
    if label_flag:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + 4 * n * d).astype(np.int64)
        if num_classes == 0:
            raise FormatError(f"{path}: labels present but C=0")
    return FeatureSet(feats.astype(np.float64), np.arange(n), labels, num_classes)


def write_csv(fs: FeatureSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{j}" for j in range(fs.dim)]
        if fs.true_labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(fs.n):
            # repr() round-trips float64 exactly
            row = [repr(float(v)) for v in fs.features[i]]
            if fs.true_labels is not None:
                row.append(str(int(fs.true_labels[i])))
            writer.writerow(row)


def read_csv(path, num_classes: int = 0) -> FeatureSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_labels = bool(header) and header[-1] == "label"
    d = len(header) - int(has_labels)
    if d <= 0:
        raise FormatError(f"{path}: header names no feature columns")
    body = [r for r in rows[1:] if r]
    feats = np.empty((len(body), d))
    labels = np.empty(len(body), dtype=np.int64) if has_labels else None
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        try:
            feats[i] = [float(v) for v in row[:d]]
            if has_labels:
                labels[i] = int(row[-1])
        except ValueError as exc:
            raise FormatError(f"{path}: row {i}: {exc}") from None
    return FeatureSet(feats, np.arange(len(body)), labels, num_classes)


def load_features(path, format: str | None = None, num_classes: int = 0) -> FeatureSet:
    """Load a FeatureSet from a FEATv1 binary or CSV file.

    ``format`` is inferred from the extension when omitted (``.csv`` means
    CSV, anything else binary).
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "csv":
        return read_csv(path, num_classes)
    if format == "binary":
        return read_binary(path)
    raise FormatError(f"unknown feature format {format!r}")


def save_features(fs: FeatureSet, path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "csv":
        write_csv(fs, path)
    elif format == "binary":
        write_binary(fs, path)
    else:
        raise FormatError(f"unknown feature format {format!r}")


# ---------------------------------------------------------------------------
# Active-learning state


@dataclass
class ALState:
    """Mutable round state over a fixed FeatureSet.

    ``labeled`` keeps query order; ``unlabeled`` is kept sorted so that
    every derived index list is reproducible.
    """

    pool: FeatureSet
    labeled: list[int] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    unlabeled: np.ndarray | None = None
    candidate: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    round: int = 0
    schedule: list[int] = field(default_factory=list)
    initial_budget: int = 0

    def __post_init__(self):
        if self.unlabeled is None:
            taken = np.zeros(self.pool.n, dtype=bool)
            taken[self.labeled] = True
            self.unlabeled = np.flatnonzero(~taken)
        if len(self.labels) != len(self.labeled):
            if self.pool.true_labels is None:
                raise PreconditionError("labels for the initial labeled set are required without an oracle")
            self.labels = [int(self.pool.true_labels[i]) for i in self.labeled]

    @property
    def labeled_array(self) -> np.ndarray:
        return np.asarray(self.labeled, dtype=np.int64)

    @property
    def labels_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)


def sample_candidate_subset(state: ALState, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly subsample ``size`` unlabeled indices and store them as the candidate set."""
    if size < 1:
        raise PreconditionError("candidate size must be >= 1")
    if len(state.unlabeled) == 0:
        raise EmptyPoolError("unlabeled pool is empty")
    m = min(size, len(state.unlabeled))
    picked = rng.choice(len(state.unlabeled), size=m, replace=False)
    state.candidate = np.sort(state.unlabeled[picked])
    return state.candidate


def query_oracle(state: ALState, indices) -> list[int]:
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise PreconditionError(f"duplicate indices in query {indices}")
    if state.pool.true_labels is None:
        raise PreconditionError("the pool carries no oracle labels")
    in_u = np.isin(indices, state.unlabeled)
    if not in_u.all():
        bad = indices[int(np.flatnonzero(~in_u)[0])]
        raise PreconditionError(f"index {bad} is not in the unlabeled pool")
    out = [int(state.pool.true_labels[i]) for i in indices]
    state.labeled.extend(indices)
    state.labels.extend(out)
    state.unlabeled = np.setdiff1d(state.unlabeled, indices, assume_unique=True)
    state.candidate = np.setdiff1d(state.candidate, indices, assume_unique=True)
    return out

"""Synthetic labeled point clouds on the unit sphere.

Each class gets a random unit mean direction. Inliers are
``normalize(mean + noise / sqrt(concentration))``; a fraction of every class
is redrawn with the noise scaled by ``outlier_spread`` and flagged harmful.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import l2_normalize

MAGIC = b"SPDS1"
_HEADER = struct.Struct("<5sII")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    per_class: int = 50
    dim: int = 16
    concentration: float = 100.0
    outlier_fraction: float = 0.0
    outlier_spread: float = 10.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError(f"outlier_fraction must be in [0, 1], got {self.outlier_fraction}")
        if not self.outlier_spread > 0:
            raise ValueError("outlier_spread must be positive")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    harmful_mask: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2:
            raise ValueError("points must be 2-D")
        n = self.points.shape[0]
        if self.labels.shape != (n,) or self.harmful_mask.shape != (n,):
            raise ValueError("labels and harmful_mask must have one entry per row")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.harmful_mask, other.harmful_mask)
        )

    @property
    def num_rows(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows)
        return LabeledDataset(self.points[rows], self.labels[rows], self.harmful_mask[rows])

    def split_classes(self, fraction: float, seed: int = 0) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Split by identity: a random ``fraction`` of classes goes to the first part."""
        classes = self.classes
        rng = np.random.default_rng(seed)
        n_first = int(round(fraction * classes.size))
        first = np.sort(rng.permutation(classes)[:n_first])
        in_first = np.isin(self.labels, first)
        return self.subset(np.flatnonzero(in_first)), self.subset(np.flatnonzero(~in_first))


def generate(spec: SyntheticSpec) -> LabeledDataset:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    means = l2_normalize(rng.standard_normal((spec.num_classes, spec.dim)))
    sigma = 1.0 / np.sqrt(spec.concentration)
    n_out = int(round(spec.outlier_fraction * spec.per_class))

    points = np.empty((spec.num_classes * spec.per_class, spec.dim))
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.per_class)
    harmful = np.zeros(points.shape[0], dtype=bool)
    for c in range(spec.num_classes):
        rows = slice(c * spec.per_class, (c + 1) * spec.per_class)
        scale = np.full(spec.per_class, sigma)
        flagged = np.zeros(spec.per_class, dtype=bool)
        if n_out:
            flagged[rng.choice(spec.per_class, size=n_out, replace=False)] = True
            scale[flagged] *= spec.outlier_spread
        noise = rng.standard_normal((spec.per_class, spec.dim)) * scale[:, None]
        raw = means[c] + noise
        # a zero row is measure-zero; redraw rather than fail
        while np.any(np.linalg.norm(raw, axis=1) <= 1e-12):
            bad = np.linalg.norm(raw, axis=1) <= 1e-12
            raw[bad] = means[c] + rng.standard_normal((bad.sum(), spec.dim)) * scale[bad, None]
        points[rows] = l2_normalize(raw)
        harmful[rows] = flagged
    return LabeledDataset(points, labels, harmful)


def save(ds: LabeledDataset, path) -> None:
    """Write the SPDS1 binary container."""
    rows, dim = ds.points.shape
    payload = b"".join(
        [
            _HEADER.pack(MAGIC, rows, dim),
            np.ascontiguousarray(ds.points, dtype="<f8").tobytes(),
            np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
            np.ascontiguousarray(ds.harmful_mask, dtype=np.uint8).tobytes(),
        ]
    )
    Path(path).write_bytes(payload)


def load(path) -> LabeledDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than header")
    magic, rows, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + rows * dim * 8 + rows * 4 + rows
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {rows}x{dim}, found {len(data)}")
    off = _HEADER.size
    points = np.frombuffer(data, dtype="<f8", count=rows * dim, offset=off).reshape(rows, dim)
    off += rows * dim * 8
    labels = np.frombuffer(data, dtype="<u4", count=rows, offset=off)
    off += rows * 4
    mask = np.frombuffer(data, dtype=np.uint8, count=rows, offset=off)
    if np.any(mask > 1):
        raise FormatError("harmful_mask bytes must be 0 or 1")
    return LabeledDataset(
        points.astype(np.float64),
        labels.astype(np.int64),
        mask.astype(bool),
    )


def to_json(ds: LabeledDataset) -> dict:
    # repr round-trips float64 exactly through json
    return {
        "rows": ds.num_rows,
        "dim": ds.dim,
        "points": ds.points.tolist(),
        "labels": ds.labels.tolist(),
        "harmful_mask": [int(b) for b in ds.harmful_mask],
    }


def from_json(obj: dict) -> LabeledDataset:
    try:
        points = np.asarray(obj["points"], dtype=np.float64).reshape(obj["rows"], obj["dim"])
        labels = np.asarray(obj["labels"], dtype=np.int64)
        mask = np.asarray(obj["harmful_mask"], dtype=bool)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad dataset JSON: {exc}") from exc
    return LabeledDataset(points, labels, mask)


def export_json(ds: LabeledDataset, path) -> None:
    Path(path).write_text(json.dumps(to_json(ds)))


def import_json(path) -> LabeledDataset:
    return from_json(json.loads(Path(path).read_text()))

"""Class-id remapping, semantic-prior encoding, and prediction sources.

Semantic evidence is attached to points as a length-C row per point, either
one-hot (hard prediction) or a normalized confidence vector. Rows whose
label is IGNORE encode as the uniform vector 1/C so every row sums to one
and downstream consumers stay branch-free.

The external predictor is abstracted as a :class:`PredictionSource` with two
capabilities: a semantic prior per scan, and per-point offset vectors per
window. :class:`FileProvider` reads both from disk; the synthetic oracle
provider lives in :mod:`panseg4d.synthlab`.
"""

from __future__ import annotations

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AllZeroRow,
    ConfigError,
    EmptyAfterFilter,
    IdOutOfRange,
    LengthMismatch,
    UnknownRawIdWarning,
)
from . import sk_formats
from .sk_formats import LabelArray
from .scan_aggregator import RigidTransform, window_relative_transform

IGNORE = -1

ONE_HOT = "one_hot"
CONFIDENCE = "confidence"

_RAW_ID_SPACE = 1 << 16


@dataclass(frozen=True)
class ClassMap:
    """Raw-id to train-id remap plus the thing/stuff split.

    ``raw_to_train`` is a dense lookup table over the 16-bit raw id space
    with IGNORE for unmapped ids; ``known_raw`` marks ids the map actually
    lists (so silently-unknown ids can be counted).
    """

    raw_to_train: np.ndarray  # (65536,) int32, IGNORE where unmapped
    known_raw: np.ndarray  # (65536,) bool
    train_to_raw: np.ndarray  # (C,) int64 canonical raw ids
    thing_mask: np.ndarray  # (C,) bool
    names: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return len(self.train_to_raw)

    def __post_init__(self):
        c = len(self.train_to_raw)
        if len(self.thing_mask) != c or len(self.names) != c:
            raise ConfigError("class map: names/things length disagrees with class count")
        back = self.raw_to_train[self.train_to_raw]
        if not np.array_equal(back, np.arange(c)):
            raise ConfigError("class map: canonical ids do not map back to their train ids")

    @classmethod
    def load(cls, path) -> "ClassMap":
        """Parse the plain-text key-value class map format."""
        n_classes = None
        things: list[int] = []
        names: dict[int, str] = {}
        remap_pairs: dict[int, int] = {}
        canonical: dict[int, int] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            key_parts = key.split()
            value = value.strip()
            try:
                if key_parts[0] == "classes":
                    n_classes = int(value)
                elif key_parts[0] == "things":
                    things = [int(t) for t in value.split()]
                elif key_parts[0] == "name":
                    names[int(key_parts[1])] = value
                elif key_parts[0] == "remap":
                    raw = int(key_parts[1])
                    remap_pairs[raw] = IGNORE if value == "ignore" else int(value)
                elif key_parts[0] == "canonical":
                    canonical[int(key_parts[1])] = int(value)
                else:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key_parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if n_classes is None:
            raise ConfigError(f"{path}: missing 'classes:' line")
        if sorted(canonical) != list(range(n_classes)):
            raise ConfigError(f"{path}: canonical ids must cover 0..{n_classes - 1}")

        raw_to_train = np.full(_RAW_ID_SPACE, IGNORE, dtype=np.int32)
        known = np.zeros(_RAW_ID_SPACE, dtype=bool)
        for raw, train in remap_pairs.items():
            if not 0 <= raw < _RAW_ID_SPACE:
                raise ConfigError(f"{path}: raw id {raw} out of 16-bit range")
            if train != IGNORE and not 0 <= train < n_classes:
                raise ConfigError(f"{path}: train id {train} out of range for raw {raw}")
            raw_to_train[raw] = train
            known[raw] = True
        thing_mask = np.zeros(n_classes, dtype=bool)
        thing_mask[things] = True
        return cls(
            raw_to_train=raw_to_train,
            known_raw=known,
            train_to_raw=np.array([canonical[t] for t in range(n_classes)], dtype=np.int64),
            thing_mask=thing_mask,
            names=tuple(names.get(t, f"class-{t}") for t in range(n_classes)),
        )

    @classmethod
    def semantic_kitti(cls) -> "ClassMap":
        """The bundled 19-class SemanticKITTI map (8 things, 11 stuff)."""
        with resources.as_file(
            resources.files("panseg4d").joinpath("data/semantic_kitti_classes.txt")
        ) as path:
            return cls.load(path)


@dataclass(frozen=True)
class SemanticPrior:
    """Per-point semantic evidence rows; each row is nonnegative and sums to 1."""

    kind: str  # ONE_HOT | CONFIDENCE
    matrix: np.ndarray  # (n, C) float64

    def __post_init__(self):
        if self.kind not in (ONE_HOT, CONFIDENCE):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise LengthMismatch(f"prior matrix must be 2-D, got shape {matrix.shape}")
        if matrix.size:
            if matrix.min() < 0:
                raise AllZeroRow("prior rows must be nonnegative")
            sums = matrix.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-6:
                bad = int(np.argmax(np.abs(sums - 1.0)))
                raise LengthMismatch(f"prior row {bad} sums to {sums[bad]!r}, expected 1")
        object.__setattr__(self, "matrix", matrix)

    def __len__(self) -> int:
        return len(self.matrix)


def remap(labels, class_map: ClassMap) -> np.ndarray:
    """Map raw semantic ids to train ids; unknown raw ids become IGNORE.

    Accepts a :class:`LabelArray` or any array of raw ids. Unknown ids are
    tolerated by design and reported once per call with their count.
    """
    raw = labels.semantic_raw if isinstance(labels, LabelArray) else np.asarray(labels, dtype=np.int64)
    raw = raw.reshape(-1)
    unknown = int((~class_map.known_raw[raw]).sum())
    if unknown:
        warnings.warn(
            f"{unknown} label(s) with raw ids absent from the class map -> IGNORE",
            UnknownRawIdWarning,
            stacklevel=2,
        )
    return class_map.raw_to_train[raw].astype(np.int64)


def encode_one_hot(train_ids, n_classes: int) -> SemanticPrior:
    """Unit-vector rows for valid ids; IGNORE rows encode as uniform 1/C."""
    ids = np.asarray(train_ids, dtype=np.int64).reshape(-1)
    valid = ids != IGNORE
    if valid.any():
        bad = valid & ((ids < 0) | (ids >= n_classes))
        if bad.any():
            i = int(np.argmax(bad))
            raise IdOutOfRange(f"train id {int(ids[i])} at row {i} outside [0, {n_classes})")
    matrix = np.zeros((len(ids), n_classes), dtype=np.float64)
    matrix[valid, ids[valid]] = 1.0
    matrix[~valid] = 1.0 / n_classes
    return SemanticPrior(kind=ONE_HOT, matrix=matrix)


def normalize_confidences(raw_scores) -> SemanticPrior:
    """Divide each nonnegative score row by its sum."""
    scores = np.asarray(raw_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise LengthMismatch(f"confidence array must be 2-D, got shape {scores.shape}")
    if scores.size and scores.min() < 0:
        raise AllZeroRow("confidence rows must be nonnegative")
    sums = scores.sum(axis=1)
    zero = sums <= 0
    if zero.any():
        raise AllZeroRow(f"confidence row {int(np.argmax(zero))} has no positive entry")
    return SemanticPrior(kind=CONFIDENCE, matrix=scores / sums[:, None])


def majority_label(member_train_ids) -> int:
    """Modal train id of the members, IGNORE excluded; ties break low."""
    ids = np.asarray(member_train_ids, dtype=np.int64).reshape(-1)
    ids = ids[ids != IGNORE]
    if ids.size == 0:
        raise EmptyAfterFilter("no members left after dropping IGNORE labels")
    values, counts = np.unique(ids, return_counts=True)
    return int(values[int(np.argmax(counts))])


def argmax_label(prior_row) -> int:
    """Index of the largest entry; ties break to the lowest index."""
    row = np.asarray(prior_row, dtype=np.float64).reshape(-1)
    return int(np.argmax(row))


def argmax_labels(prior_matrix) -> np.ndarray:
    """Row-wise :func:`argmax_label` for a full prior matrix."""
    return np.argmax(np.asarray(prior_matrix, dtype=np.float64), axis=1).astype(np.int64)


class PredictionSource(ABC):
    """Provider of semantic priors per scan and offset fields per window.

    Offsets returned by :meth:`window_offsets` are expressed in the frame of
    the window's reference scan and are row-aligned with the aggregated
    cloud (scans concatenated in window order).
    """

    @abstractmethod
    def semantic_prior(self, scan_index: int) -> SemanticPrior:
        ...

    @abstractmethod
    def window_offsets(self, window: tuple[int, int]) -> np.ndarray:
        ...


class FileProvider(PredictionSource):
    """Reads priors and offsets from per-scan files.

    Semantic inputs are either ``.label``-format files (semantic field used,
    instance field ignored) or confidence files (N x C float32 rows). Offset
    files hold N x 3 float32 rows per scan; ``offset_frame`` declares whether
    the stored vectors are already in the consuming window's reference frame
    ("window") or in each scan's own sensor frame ("sensor", rotated into the
    window frame at load using the lidar poses).
    """

    def __init__(
        self,
        class_map: ClassMap,
        scan_sizes: Sequence[int],
        semantic_paths: Sequence | None = None,
        confidence_paths: Sequence | None = None,
        offset_paths: Sequence | None = None,
        lidar_poses: Sequence[RigidTransform] | None = None,
        offset_frame: str = "window",
    ):
        if (semantic_paths is None) == (confidence_paths is None):
            raise ConfigError("provide exactly one of semantic_paths / confidence_paths")
        if offset_frame not in ("window", "sensor"):
            raise ConfigError(f"offset_frame must be 'window' or 'sensor', got {offset_frame!r}")
        if offset_frame == "sensor" and lidar_poses is None:
            raise ConfigError("sensor-frame offsets require lidar_poses for rotation")
        self.class_map = class_map
        self.scan_sizes = list(scan_sizes)
        self.semantic_paths = list(semantic_paths) if semantic_paths is not None else None
        self.confidence_paths = list(confidence_paths) if confidence_paths is not None else None
        self.offset_paths = list(offset_paths) if offset_paths is not None else None
        self.lidar_poses = list(lidar_poses) if lidar_poses is not None else None
        self.offset_frame = offset_frame

    def _path_for(self, paths, scan_index: int, what: str):
        if paths is None or scan_index >= len(paths):
            raise FileNotFoundError(f"no {what} file configured for scan {scan_index}")
        path = Path(paths[scan_index])
        if not path.exists():
            raise FileNotFoundError(f"{what} file for scan {scan_index} not found: {path}")
        return path

    def semantic_prior(self, scan_index: int) -> SemanticPrior:
        n = self.scan_sizes[scan_index]
        if self.semantic_paths is not None:
            path = self._path_for(self.semantic_paths, scan_index, "semantic label")
            labels = sk_formats.read_labels(path, n)
            return encode_one_hot(remap(labels, self.class_map), self.class_map.n_classes)
        path = self._path_for(self.confidence_paths, scan_index, "confidence")
        scores = sk_formats.read_confidences(path, n, self.class_map.n_classes)
        return normalize_confidences(scores)

    def window_offsets(self, window: tuple[int, int]) -> np.ndarray:
        start, n = window
        rows = []
        for scan_index in range(start, start + n):
            path = self._path_for(self.offset_paths, scan_index, "offset")
            offsets = sk_formats.read_offsets(path, self.scan_sizes[scan_index])
            if self.offset_frame == "sensor":
                rotation = window_relative_transform(self.lidar_poses, start, scan_index).rotation
                offsets = offsets @ rotation.T
            rows.append(offsets)
        return np.concatenate(rows) if rows else np.zeros((0, 3))

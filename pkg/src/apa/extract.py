"""
Condition-level features: partition scans by event, sum within each
condition, mask by the category's positive betas and pool over atlas regions.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from apa.glm import OnsetTable, PositiveBetaMaps
from apa.volume import AtlasVolume, Volume3D, Volume4D, check_same_geometry


class EmptyRegionWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ConditionImage:
    category_index: int
    condition_index: int
    data: np.ndarray  # (K, nx, ny, nz)
    spacing: tuple
    scan_indices: tuple = ()

    @property
    def n_scans(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ConditionSum:
    category_index: int
    condition_index: int
    image: Volume3D


@dataclass(frozen=True)
class MaskedCondition:
    category_index: int
    condition_index: int
    image: Volume3D


@dataclass(frozen=True, eq=False)
class FeatureVector:
    category_index: int
    condition_index: int
    subject_id: str
    values: np.ndarray
    session_id: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if not np.all(np.isfinite(values)):
            raise ValueError("feature vector has non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ProcessedSession:
    """Feature vectors of one session plus the labels needed to table them."""

    subject_id: str
    session_id: str
    categories: tuple
    atlas_id: str
    features: tuple


@dataclass(frozen=True, eq=False)
class FeatureTable:
    rows: tuple
    atlas_id: str
    categories: tuple

    def __post_init__(self):
        if not self.rows:
            raise ValueError("feature table needs at least one row")
        lengths = {len(r.values) for r in self.rows}
        if len(lengths) != 1:
            raise ValueError(f"feature vectors have mixed lengths {sorted(lengths)}")
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def n_features(self) -> int:
        return len(self.rows[0].values)

    @property
    def labels(self) -> list:
        return [self.categories[r.category_index] for r in self.rows]

    @property
    def X(self) -> np.ndarray:
        return np.vstack([r.values for r in self.rows])

    @property
    def y(self) -> np.ndarray:
        return np.array([r.category_index for r in self.rows], dtype=np.int64)

    @property
    def subjects(self) -> np.ndarray:
        return np.array([r.subject_id for r in self.rows])

    def subset(self, mask) -> "FeatureTable":
        rows = [r for r, keep in zip(self.rows, mask) if keep]
        return FeatureTable(tuple(rows), self.atlas_id, self.categories)

    def to_csv(self, path) -> None:
        """Columns subject,session,category,condition,f1..fL; floats as repr."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", "session", "category", "condition"]
                       + [f"f{l + 1}" for l in range(self.n_features)])
            for r in self.rows:
                w.writerow([r.subject_id, r.session_id, self.categories[r.category_index],
                            r.condition_index] + [repr(float(v)) for v in r.values])

    @classmethod
    def from_csv(cls, path, atlas_id: str = "atlas", categories: Sequence[str] | None = None) -> "FeatureTable":
        """Read a table back; categories default to first-appearance order."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:4] != ["subject", "session", "category", "condition"]:
                raise ValueError(f"{path}: unexpected header {header[:4]}")
            raw = list(reader)
        cats = list(categories) if categories else []
        rows = []
        for rec in raw:
            if rec[2] not in cats:
                if categories:
                    raise ValueError(f"{path}: unknown category {rec[2]!r}")
                cats.append(rec[2])
            rows.append(FeatureVector(cats.index(rec[2]), int(rec[3]), rec[0],
                                      [float(v) for v in rec[4:]], session_id=rec[1]))
        return cls(tuple(rows), atlas_id, tuple(cats))


def scans_for_event(onset: float, duration: float, tr: float, n_scans: int, lag_scans: int = 0) -> list:
    """Scans k with ``onset <= (k - lag) * tr < onset + duration`` and k < n_scans."""
    first = math.ceil(onset / tr - 1e-9)
    stop = math.ceil((onset + duration) / tr - 1e-9)
    return [k + lag_scans for k in range(first, stop) if 0 <= k + lag_scans < n_scans]


def partition_conditions(data: Volume4D, onsets: OnsetTable, tr: float,
                         lag_scans: int = 0) -> list:
    """Split the session into per-event 4D blocks ordered by (category, condition)."""
    events = onsets.events
    for a, b in zip(events, events[1:]):
        if b.onset < a.onset + a.duration - 1e-9:
            raise ValueError(f"overlapping events: {a} and {b}")
    out = []
    for e in sorted(events, key=lambda e: (e.category, e.condition)):
        idx = scans_for_event(e.onset, e.duration, tr, data.n_scans, lag_scans)
        if not idx:
            raise ValueError(f"event {e} covers no scans (tr={tr}, lag={lag_scans})")
        block = data.data[idx]
        block.setflags(write=False)
        out.append(ConditionImage(e.category, e.condition, block, data.spacing, tuple(idx)))
    return out


def sum_condition(cond: ConditionImage) -> ConditionSum:
    return ConditionSum(cond.category_index, cond.condition_index,
                        Volume3D(cond.data.sum(axis=0), cond.spacing))


def apply_beta_mask(summed: ConditionSum, pos: PositiveBetaMaps) -> MaskedCondition:
    p = summed.category_index
    if not 0 <= p < pos.n_categories:
        raise IndexError(f"category {p} outside 0..{pos.n_categories - 1}")
    mask = pos.maps[p]
    check_same_geometry(summed.image, mask, "beta mask")
    return MaskedCondition(p, summed.condition_index, mask.with_data(mask.data * summed.image.data))


def region_means(image: np.ndarray, atlas: AtlasVolume) -> tuple:
    """Per-region means for labels 1..L and the region sizes."""
    L = atlas.n_regions
    lab = atlas.labels.ravel()
    sums = np.bincount(lab, weights=image.ravel(), minlength=L + 1)[1:]
    sizes = np.bincount(lab, minlength=L + 1)[1:]
    means = np.divide(sums, sizes, out=np.zeros(L), where=sizes > 0)
    return means, sizes


def pool_atlas_features(image: Volume3D, atlas: AtlasVolume, category_index: int = -1,
                        condition_index: int = -1, subject_id: str = "",
                        session_id: str = "") -> FeatureVector:
    """Mean of ``image`` over every atlas region; empty regions give 0."""
    check_same_geometry(image, atlas, "atlas pooling")
    means, sizes = region_means(image.data, atlas)
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        warnings.warn(f"{empty.size} empty atlas region(s) set to 0: labels {(empty + 1).tolist()[:10]}",
                      EmptyRegionWarning, stacklevel=2)
    return FeatureVector(category_index, condition_index, subject_id, means, session_id)


def build_feature_table(sessions: Sequence[ProcessedSession]) -> FeatureTable:
    """Stack per-session features into one table with a shared category list."""
    if not sessions:
        raise ValueError("no sessions to tabulate")
    atlas_ids = {s.atlas_id for s in sessions}
    if len(atlas_ids) != 1:
        raise ValueError(f"sessions were pooled with different atlases: {sorted(atlas_ids)}")
    cats: list = []
    for s in sessions:
        for c in s.categories:
            if c not in cats:
                cats.append(c)
    rows = []
    for s in sessions:
        for fv in s.features:
            name = s.categories[fv.category_index]
            rows.append(FeatureVector(cats.index(name), fv.condition_index, s.subject_id,
                                      fv.values, session_id=s.session_id))
    return FeatureTable(tuple(rows), atlas_ids.pop(), tuple(cats))

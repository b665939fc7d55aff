"""
Affine registration of condition images to a reference volume.

Coordinates are physical millimetres with voxel ``i`` at ``i * spacing``.
An ``AffineTransform`` maps moving-image coordinates to reference
coordinates; resampling pulls each reference voxel from the moving image at
the inverse-mapped position.

Similarity is computed from a joint histogram of the two images over the
reference grid, with samples falling outside the moving image read as 0
(optionally over the overlap only).  NMI, MI and CR are maximized;
joint entropy and the Woods criterion are costs and are minimized.  The
optimizer works on a 9-parameter family (translation, rotation about the
reference centre, per-axis scale) with coarse-to-fine coordinate descent.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.linalg import polar

from apa.volume import AtlasVolume, Geometry, Volume3D, check_same_geometry

logger = logging.getLogger(__name__)

METRICS = (
    "woods",
    "correlation_ratio",
    "joint_entropy",
    "mutual_information",
    "normalized_mutual_information",
)
METRIC_ALIASES = {"w": "woods", "cr": "correlation_ratio", "je": "joint_entropy",
                  "mi": "mutual_information", "nmi": "normalized_mutual_information"}
# metrics where a larger value means better alignment
MAXIMIZED = {"correlation_ratio", "mutual_information", "normalized_mutual_information"}


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AffineTransform:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(m)) or not np.all(np.isfinite(t)):
            raise RegistrationError("transform has non-finite entries")
        if abs(np.linalg.det(m)) <= 1e-9:
            raise RegistrationError("transform matrix is singular")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points given as an ``(..., 3)`` array."""
        return np.asarray(points) @ self.matrix.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self`` after ``other``."""
        return AffineTransform(self.matrix @ other.matrix,
                               self.matrix @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"matrix": [float(v) for v in self.matrix.ravel()],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(np.asarray(d["matrix"], dtype=np.float64).reshape(3, 3), d["translation"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "AffineTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles in degrees about x, y, z."""
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def params_to_transform(params: Sequence[float], center: Sequence[float]) -> AffineTransform:
    """9-vector ``[t(mm) x3, rotation(deg) x3, log-scale x3]`` about ``center``.

    ``T(x) = R S (x - c) + c + t``.
    """
    p = np.asarray(params, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    m = rotation_matrix(p[3:6]) @ np.diag(np.exp(p[6:9]))
    return AffineTransform(m, p[0:3] + c - m @ c)


def rotation_angle_deg(matrix: np.ndarray) -> float:
    """Angle of the rotation factor of ``matrix`` (polar decomposition)."""
    u, _ = polar(np.asarray(matrix, dtype=np.float64))
    cos = np.clip((np.trace(u) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def geometry_center(geom: Geometry) -> np.ndarray:
    return (np.asarray(geom.dims) - 1) / 2.0 * np.asarray(geom.spacing)


def _grid_points(geom: Geometry) -> np.ndarray:
    """All voxel centres of ``geom`` in mm, shape (n, 3), C order over (x, y, z)."""
    axes = [np.arange(n) * s for n, s in zip(geom.dims, geom.spacing)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def _trilinear(src: np.ndarray, idx: np.ndarray):
    """Sample ``src`` at fractional voxel positions ``idx`` (n, 3).

    Returns values and an in-bounds mask; samples outside ``[0, n - 1]`` on
    any axis are 0.
    """
    dims = np.asarray(src.shape)
    tol = 1e-6
    inside = np.all((idx >= -tol) & (idx <= dims - 1 + tol), axis=1)
    pos = np.clip(idx, 0, dims - 1)
    vals = ndimage.map_coordinates(src, pos.T, order=1, mode="nearest", prefilter=False)
    return np.where(inside, vals, 0.0), inside


def _sample(src: Volume3D, t: AffineTransform, points: np.ndarray):
    inv = t.inverse()
    idx = inv.apply(points) / np.asarray(src.spacing)
    return _trilinear(src.data, idx)


def resample_trilinear(src: Volume3D, t: AffineTransform, ref_geom: Geometry,
                       return_mask: bool = False):
    """Resample ``src`` onto ``ref_geom`` through ``t`` (moving -> reference)."""
    if not isinstance(t, AffineTransform):
        t = AffineTransform(*t)
    vals, inside = _sample(src, t, _grid_points(ref_geom))
    out = Volume3D(vals.reshape(ref_geom.dims), ref_geom.spacing)
    if return_mask:
        return out, inside.reshape(ref_geom.dims)
    return out


@dataclass(frozen=True)
class SimilarityMetric:
    kind: str = "normalized_mutual_information"
    n_bins: int = 64

    def __post_init__(self):
        kind = METRIC_ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in METRICS:
            raise ValueError(f"unknown similarity metric {self.kind!r}; choose from {METRICS}")
        if int(self.n_bins) < 2:
            raise ValueError("n_bins must be >= 2")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "n_bins", int(self.n_bins))

    @property
    def maximize(self) -> bool:
        return self.kind in MAXIMIZED

    def objective(self, value: float) -> float:
        """Value oriented so that larger is always better."""
        return value if self.maximize else -value


def _quantize(v: np.ndarray, n_bins: int) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.int64)
    q = ((v - lo) * (n_bins / (hi - lo))).astype(np.int64)
    return np.minimum(q, n_bins - 1)


def _entropy(counts: np.ndarray) -> float:
    c = counts[counts > 0].astype(np.float64)
    n = c.sum()
    if n == 0:
        return 0.0
    p = c / n
    return float(-(p * np.log(p)).sum())


class JointHistogram:
    """Counts of (bin of a, bin of b) pairs; each image min/max-scaled."""

    def __init__(self, a: np.ndarray, b: np.ndarray, n_bins: int = 64):
        a = np.asarray(a, dtype=np.float64).ravel()
        b = np.asarray(b, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValueError("histogram inputs differ in size")
        if a.size == 0:
            raise ValueError("no overlapping voxels")
        self.n_bins = n_bins
        qa, qb = _quantize(a, n_bins), _quantize(b, n_bins)
        self.bins = np.bincount(qa * n_bins + qb, minlength=n_bins * n_bins).reshape(n_bins, n_bins)
        self.marginal_a = self.bins.sum(axis=1)
        self.marginal_b = self.bins.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.bins.sum())

    def entropy_a(self) -> float:
        return _entropy(self.marginal_a)

    def entropy_b(self) -> float:
        return _entropy(self.marginal_b)

    def joint_entropy(self) -> float:
        return _entropy(self.bins)

    def mutual_information(self) -> float:
        return self.entropy_a() + self.entropy_b() - self.joint_entropy()

    def normalized_mutual_information(self) -> float:
        h = self.joint_entropy()
        if h <= 0.0:
            return 1.0
        return (self.entropy_a() + self.entropy_b()) / h

    def _conditional_moments(self):
        # b intensities represented by bin centres, strictly positive
        centres = np.arange(self.n_bins) + 0.5
        n_k = self.marginal_a.astype(np.float64)
        s1 = self.bins @ centres
        s2 = self.bins @ (centres ** 2)
        occupied = n_k > 0
        mu = np.zeros(self.n_bins)
        var = np.zeros(self.n_bins)
        mu[occupied] = s1[occupied] / n_k[occupied]
        var[occupied] = np.maximum(s2[occupied] / n_k[occupied] - mu[occupied] ** 2, 0.0)
        return n_k, mu, var, occupied, centres

    def correlation_ratio(self) -> float:
        """``1 - sum_k n_k var_k / (N var)`` of b within iso-sets of a."""
        n_k, _, var, _, centres = self._conditional_moments()
        N = n_k.sum()
        pb = self.marginal_b / N
        total_var = float(pb @ centres ** 2 - (pb @ centres) ** 2)
        if total_var <= 0.0:
            return 0.0
        return float(1.0 - (n_k @ var) / (N * total_var))

    def woods(self) -> float:
        """``sum_k (n_k / N) sigma_k / mu_k`` of b within iso-sets of a."""
        n_k, mu, var, occupied, _ = self._conditional_moments()
        N = n_k.sum()
        return float(np.sum(n_k[occupied] / N * np.sqrt(var[occupied]) / mu[occupied]))

    def value(self, kind: str) -> float:
        return getattr(self, kind)()


def compute_similarity(a: Volume3D, b: Volume3D, metric: SimilarityMetric = SimilarityMetric(),
                       mask: np.ndarray | None = None) -> float:
    """Similarity of ``a`` (reference) and ``b`` (moving) over ``mask`` voxels."""
    check_same_geometry(a, b, "similarity")
    av, bv = a.data, b.data
    if mask is not None:
        av, bv = av[mask], bv[mask]
    return JointHistogram(av, bv, metric.n_bins).value(metric.kind)


@dataclass(frozen=True)
class SearchConfig:
    """Coarse-to-fine coordinate descent schedule.

    Step sizes are given for the finest level and multiplied by the level's
    downsampling factor.  ``dof`` is 6 (rigid) or 9 (rigid + axis scales).
    """

    levels: tuple = (4, 2, 1)
    translation_step: float = 1.0  # voxels
    rotation_step: float = 1.5  # degrees
    scale_step: float = 0.01  # log-scale
    shrink: float = 0.5
    n_shrinks: int = 4
    max_sweeps: int = 40
    dof: int = 9
    min_overlap: float = 0.25
    rigid_first: bool = True
    smoothing: float = 0.0  # extra Gaussian sigma (voxels) applied at every level
    domain: str = "full"  # "full": whole reference grid, outside samples 0; "overlap": inside only

    def __post_init__(self):
        if not self.levels or any(int(f) < 1 for f in self.levels):
            raise ValueError("levels must be positive integers")
        if self.dof not in (3, 6, 9):
            raise ValueError("dof must be 3, 6 or 9")
        if self.domain not in ("full", "overlap"):
            raise ValueError(f"domain must be 'full' or 'overlap', got {self.domain!r}")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        object.__setattr__(self, "levels", tuple(int(f) for f in self.levels))


def downsample(vol: Volume3D, factor: int, extra_sigma: float = 0.0) -> Volume3D:
    """Gaussian pre-smoothing then decimation; spacing grows by ``factor``."""
    sigma = math.hypot(factor / 2.0 if factor > 1 else 0.0, extra_sigma)
    if sigma == 0.0:
        return vol
    smooth = ndimage.gaussian_filter(vol.data, sigma=sigma, mode="constant")
    sub = smooth[::factor, ::factor, ::factor]
    return Volume3D(sub, tuple(s * factor for s in vol.spacing))


class _LevelObjective:
    def __init__(self, moving: Volume3D, ref: Volume3D, metric: SimilarityMetric,
                 center: np.ndarray, n_bins: int, min_overlap: float, domain: str = "full"):
        self.moving = moving
        self.ref = ref
        self.metric = metric
        self.center = center
        self.n_bins = n_bins
        self.points = _grid_points(ref.geometry)
        self.ref_flat = ref.data.ravel()
        self.min_count = max(8, int(min_overlap * self.ref_flat.size))
        self.domain = domain
        self.n_evals = 0

    def raw(self, params):
        t = params_to_transform(params, self.center)
        vals, inside = _sample(self.moving, t, self.points)
        if inside.sum() < self.min_count:
            return None
        if self.domain == "full":
            h = JointHistogram(self.ref_flat, vals, self.n_bins)
        else:
            h = JointHistogram(self.ref_flat[inside], vals[inside], self.n_bins)
        return h.value(self.metric.kind)

    def __call__(self, params) -> float:
        self.n_evals += 1
        v = self.raw(params)
        return -np.inf if v is None else self.metric.objective(v)


def _explore(f, x, fx, steps, active):
    """One coordinate sweep: take the first improving +/- step on each axis."""
    for i in active:
        for sign in (1.0, -1.0):
            trial = x.copy()
            trial[i] += sign * steps[i]
            v = f(trial)
            if v > fx:
                x, fx = trial, v
                break
    return x, fx


def _coordinate_descent(f, params, steps, active, cfg: SearchConfig, final: bool):
    """Coordinate search with shrinking steps and Hooke-Jeeves pattern moves.

    A sweep that improves is extrapolated along the accumulated displacement,
    which lets the search follow valleys that are not axis-aligned.
    """
    base, fbase = params, f(params)
    n_shrinks = cfg.n_shrinks + (2 if final else 0)
    shrinks = 0
    sweeps = 0
    while shrinks <= n_shrinks and sweeps < cfg.max_sweeps * (n_shrinks + 1):
        sweeps += 1
        x, fx = _explore(f, base, fbase, steps, active)
        if fx <= fbase:
            steps = steps * cfg.shrink
            shrinks += 1
            continue
        while True:
            pattern = x + (x - base)
            base, fbase = x, fx
            xp, fp = _explore(f, pattern, f(pattern), steps, active)
            if fp <= fbase:
                break
            x, fx = xp, fp
    return base, fbase


def optimize_transform(moving: Volume3D, ref: Volume3D,
                       metric: SimilarityMetric = SimilarityMetric(),
                       search: SearchConfig = SearchConfig()) -> AffineTransform:
    """Best affine map of ``moving`` onto ``ref`` under ``metric``.

    Never returns a transform that scores worse than the identity at full
    resolution.
    """
    for name, v in (("moving", moving), ("reference", ref)):
        if np.ptp(v.data) == 0:
            raise RegistrationError(f"{name} image is constant; registration is undefined")
    params, _ = optimize_params(moving, ref, metric, search)
    return params_to_transform(params, geometry_center(ref.geometry))


def optimize_params(moving: Volume3D, ref: Volume3D, metric: SimilarityMetric,
                    search: SearchConfig):
    """Run the search; returns the 9-parameter vector and its full-res objective."""
    center = geometry_center(ref.geometry)
    params = np.zeros(9)
    rigid = list(range(3)) + (list(range(3, 6)) if search.dof >= 6 else [])
    full_dof = rigid + (list(range(6, 9)) if search.dof == 9 else [])
    min_sp = min(ref.spacing)
    levels = search.levels
    for li, f in enumerate(levels):
        mov_l = downsample(moving, f, search.smoothing)
        ref_l = downsample(ref, f, search.smoothing)
        bins = max(8, metric.n_bins // f)
        obj = _LevelObjective(mov_l, ref_l, metric, center, bins, search.min_overlap, search.domain)
        steps = np.array([search.translation_step * f * min_sp] * 3
                         + [search.rotation_step * f] * 3 + [search.scale_step * f] * 3)
        last = li == len(levels) - 1
        # scales are only freed once the rigid part has settled
        active = full_dof if last or not search.rigid_first else rigid
        params, best = _coordinate_descent(obj, params, steps, active, search, final=last)
        logger.debug("level x%d: objective %.6f after %d evaluations", f, best, obj.n_evals)
    full = _LevelObjective(moving, ref, metric, center, metric.n_bins, search.min_overlap, search.domain)
    found, ident = full(params), full(np.zeros(9))
    if ident >= found:
        return np.zeros(9), ident
    return params, found


@dataclass(frozen=True)
class RegisteredCondition:
    image: Volume3D
    transform: AffineTransform
    score: float
    category_index: int = -1
    condition_index: int = -1


def register_image(moving: Volume3D, ref: Volume3D, metric: SimilarityMetric = SimilarityMetric(),
                   search: SearchConfig = SearchConfig(), category_index: int = -1,
                   condition_index: int = -1) -> RegisteredCondition:
    """Optimize, resample onto the reference grid and report the final metric."""
    t = optimize_transform(moving, ref, metric, search)
    out, inside = resample_trilinear(moving, t, ref.geometry, return_mask=True)
    score = compute_similarity(ref, out, metric, mask=inside) if inside.any() else float("nan")
    return RegisteredCondition(out, t, score, category_index, condition_index)


def registration_error(img: Volume3D, atlas: AtlasVolume, tol: float = 0.0) -> float:
    """Fraction of nonzero image voxels that fall on atlas background."""
    check_same_geometry(img, atlas, "registration error")
    nz = np.abs(img.data) > tol
    n = int(nz.sum())
    if n == 0:
        return 0.0
    return float(np.sum(nz & (atlas.labels == 0)) / n)


def transform_error(estimated: AffineTransform, applied: AffineTransform, geom: Geometry):
    """Residual of ``estimated`` undoing ``applied`` at the grid centre.

    Returns ``(translation error in voxels, rotation error in degrees)``.
    """
    resid = estimated.compose(applied)
    c = geometry_center(geom)
    shift = (resid.apply(c) - c) / np.asarray(geom.spacing)
    return float(np.linalg.norm(shift)), rotation_angle_deg(resid.matrix)

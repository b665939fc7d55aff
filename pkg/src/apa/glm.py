"""
Design-matrix construction and per-voxel generalized least squares.

The session model is ``F = D @ beta + eps`` with ``Var(eps) = sigma2 * V``.
``D`` has one column per stimulus category (boxcar of that category's events
convolved with a double-gamma HRF).  ``V`` is either the identity or the
stationary AR(1) correlation matrix ``V[i, j] = rho ** |i - j|``, whose
inverse is tridiagonal; that structure is used directly instead of forming
``V^-1``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy import linalg, stats

from apa.volume import Volume3D, Volume4D

logger = logging.getLogger(__name__)


class RankDeficiencyError(ValueError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class Event(NamedTuple):
    onset: float
    duration: float
    category: int
    condition: int


@dataclass(frozen=True)
class OnsetTable:
    """Stimulus events of one session, sorted by onset."""

    events: tuple
    n_categories: int

    def __post_init__(self):
        events = tuple(Event(float(e[0]), float(e[1]), int(e[2]), int(e[3])) for e in self.events)
        events = tuple(sorted(events, key=lambda e: (e.onset, e.category, e.condition)))
        P = int(self.n_categories)
        if P < 1:
            raise ValueError("n_categories must be >= 1")
        for e in events:
            if e.onset < 0 or not np.isfinite(e.onset):
                raise ValueError(f"event onset must be finite and >= 0: {e}")
            if not e.duration > 0:
                raise ValueError(f"event duration must be > 0: {e}")
            if not 0 <= e.category < P:
                raise ValueError(f"event category {e.category} outside 0..{P - 1}")
            if e.condition < 0:
                raise ValueError(f"event condition index must be >= 0: {e}")
        seen = {(e.category, e.condition) for e in events}
        if len(seen) != len(events):
            raise ValueError("each (category, condition) pair must appear once")
        empty = sorted(set(range(P)) - {e.category for e in events})
        if empty:
            raise ValueError(f"categories without events: {empty}")
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "n_categories", P)

    def conditions_per_category(self) -> list:
        """Q_p for p = 0..P-1."""
        counts = [0] * self.n_categories
        for e in self.events:
            counts[e.category] += 1
        return counts

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["onset", "duration", "category", "condition"])
            for e in self.events:
                w.writerow([repr(e.onset), repr(e.duration), e.category, e.condition])

    @classmethod
    def from_csv(cls, path, n_categories: int | None = None) -> "OnsetTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) < {"onset", "duration", "category", "condition"}:
                raise ValueError(f"{path}: expected header onset,duration,category,condition")
            rows = [Event(float(r["onset"]), float(r["duration"]), int(r["category"]), int(r["condition"]))
                    for r in reader]
        if not rows:
            raise ValueError(f"{path}: no events")
        if n_categories is None:
            n_categories = max(e.category for e in rows) + 1
        return cls(tuple(rows), n_categories)


@dataclass(frozen=True)
class HrfParams:
    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0
    length: float = 32.0

    def __post_init__(self):
        for name in ("peak_delay", "undershoot_delay", "peak_dispersion",
                     "undershoot_dispersion", "length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"HrfParams.{name} must be positive")
        if self.undershoot_ratio < 0:
            raise ValueError("HrfParams.undershoot_ratio must be >= 0")
        if self.length < self.undershoot_delay:
            raise ValueError("HrfParams.length must be >= undershoot_delay")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "identity"
    rho: float = 0.0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "ar1"):
            raise ValueError(f"unknown noise model kind {self.kind!r}")
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"AR(1) rho must lie in (-1, 1), got {self.rho}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def covariance(self, n: int) -> np.ndarray:
        """Dense ``V`` (without sigma2).  Only for oracles and small problems."""
        if self.kind == "identity":
            return np.eye(n)
        idx = np.arange(n)
        return self.rho ** np.abs(idx[:, None] - idx[None, :])


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise ValueError("design matrix must be 2D")
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"reg{p}" for p in range(values.shape[1])))

    @property
    def n_scans(self) -> int:
        return self.values.shape[0]

    @property
    def n_regressors(self) -> int:
        return self.values.shape[1]

    def dependent_columns(self) -> list:
        """Columns that are linear combinations of the others (empty if full rank)."""
        D = self.values
        if D.size == 0:
            return []
        _, R, piv = linalg.qr(D, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(D.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        return sorted(int(c) for c in piv[rank:])

    @property
    def is_full_rank(self) -> bool:
        return self.n_regressors <= self.n_scans and not self.dependent_columns()


@dataclass(frozen=True)
class BetaMaps:
    maps: tuple
    residual_variance: Volume3D

    @property
    def n_categories(self) -> int:
        return len(self.maps)


@dataclass(frozen=True)
class PositiveBetaMaps:
    maps: tuple

    @property
    def n_categories(self) -> int:
        return len(self.maps)


def canonical_hrf(params: HrfParams = HrfParams(), dt: float = 0.1) -> np.ndarray:
    """Double-gamma HRF sampled every ``dt`` seconds, peak-normalized to 1.

    Each gamma density is parametrized so that its mode sits at the given
    delay (shape ``delay / dispersion + 1``, scale ``dispersion``).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = int(math.ceil(params.length / dt))
    t = np.arange(n) * dt
    peak = stats.gamma.pdf(t, params.peak_delay / params.peak_dispersion + 1.0,
                           scale=params.peak_dispersion)
    under = stats.gamma.pdf(t, params.undershoot_delay / params.undershoot_dispersion + 1.0,
                            scale=params.undershoot_dispersion)
    h = peak - params.undershoot_ratio * under
    return h / h.max()


def build_design_matrix(onsets: OnsetTable, hrf: Union[HrfParams, Sequence[float]],
                        n_scans: int, tr: float, oversampling: int = 16) -> DesignMatrix:
    """Per-category boxcars convolved with the HRF and sampled at ``k * tr``.

    With ``HrfParams`` the kernel is scaled by the fine time step so the
    column approximates the continuous convolution integral.  A raw kernel
    is taken to be sampled at ``tr / oversampling`` and used as given.
    """
    if not tr > 0 or n_scans < 1:
        raise ValueError("tr must be positive and n_scans >= 1")
    window = n_scans * tr
    for e in onsets.events:
        if e.onset + e.duration > window + 1e-9:
            raise ValueError(f"event at {e.onset}s (+{e.duration}s) ends after the "
                             f"scan window of {window}s")
    dt = tr / oversampling
    if isinstance(hrf, HrfParams):
        kernel = canonical_hrf(hrf, dt) * dt
    else:
        kernel = np.asarray(hrf, dtype=np.float64)
    n_fine = n_scans * oversampling
    t = np.arange(n_fine) * dt
    cols = np.zeros((n_scans, onsets.n_categories))
    # half-step guard so onsets on the grid are not lost to rounding
    eps = dt * 1e-6
    for p in range(onsets.n_categories):
        box = np.zeros(n_fine)
        for e in onsets.events:
            if e.category == p:
                box[(t >= e.onset - eps) & (t < e.onset + e.duration - eps)] = 1.0
        conv = np.convolve(box, kernel)[:n_fine]
        cols[:, p] = conv[::oversampling]
    design = DesignMatrix(cols, tuple(f"cat{p}" for p in range(onsets.n_categories)))
    bad = design.dependent_columns()
    if bad:
        logger.warning("design matrix is rank deficient; dependent columns %s", bad)
    return design


def ar1_whiten(x: np.ndarray, rho: float) -> np.ndarray:
    """Apply ``W`` with ``W.T @ W = V^-1`` for the AR(1) correlation ``V``.

    Prais-Winsten transform along axis 0, scaled by ``1 / sqrt(1 - rho**2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if rho == 0.0:
        return x.copy()
    c = math.sqrt(1.0 - rho * rho)
    out = np.empty_like(x)
    out[0] = x[0]
    out[1:] = (x[1:] - rho * x[:-1]) / c
    return out


def ar1_precision_apply(x: np.ndarray, rho: float) -> np.ndarray:
    """``V^-1 @ x`` using the tridiagonal inverse of the AR(1) correlation."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    s = 1.0 / (1.0 - rho * rho)
    out = (1.0 + rho * rho) * x
    out[0] = x[0]
    if n > 1:
        out[-1] = x[-1]
        out[:-1] -= rho * x[1:]
        out[1:] -= rho * x[:-1]
    return s * out


def _whiten(x, noise: NoiseModel):
    if noise.kind == "identity":
        return np.asarray(x, dtype=np.float64)
    return ar1_whiten(x, noise.rho)


def estimate_gls(data: Volume4D, design: DesignMatrix,
                 noise: NoiseModel = NoiseModel(), chunk_voxels: int = 65536) -> BetaMaps:
    """Per-voxel GLS estimate ``(D' V^-1 D)^-1 D' V^-1 F``.

    Solved as ordinary least squares on whitened data via a QR factorization
    of the whitened design.  The residual variance map holds
    ``r' V^-1 r / (N - P)``.  Coefficients below the solve's roundoff floor
    (``4 N eps cond(R)`` times the voxel's largest coefficient) are returned
    as exact zeros, so a planted zero does not come back as +/-1e-17.
    """
    N, P = design.n_scans, design.n_regressors
    if data.n_scans != N:
        raise ValueError(f"design has {N} scans but data has {data.n_scans}")
    if N <= P:
        raise ValueError(f"need more scans than regressors (N={N}, P={P})")
    bad = design.dependent_columns()
    if bad:
        names = [design.names[c] for c in bad]
        raise RankDeficiencyError(f"design matrix is rank deficient in columns {bad} {names}", bad)

    Dw = _whiten(design.values, noise)
    Q, R = linalg.qr(Dw, mode="economic")
    floor = 4.0 * N * np.finfo(np.float64).eps * np.linalg.cond(R)
    F = data.as_matrix()
    n_vox = F.shape[1]
    betas = np.empty((P, n_vox))
    resvar = np.empty(n_vox)
    for start in range(0, n_vox, chunk_voxels):
        sl = slice(start, min(start + chunk_voxels, n_vox))
        Fw = _whiten(F[:, sl], noise)
        b = linalg.solve_triangular(R, Q.T @ Fw)
        r = Fw - Dw @ b
        b[np.abs(b) <= floor * np.abs(b).max(axis=0)] = 0.0
        betas[:, sl] = b
        resvar[sl] = np.einsum("ij,ij->j", r, r) / (N - P)
    shape = data.dims
    maps = tuple(Volume3D(betas[p].reshape(shape), data.spacing) for p in range(P))
    return BetaMaps(maps, Volume3D(resvar.reshape(shape), data.spacing))


def positive_mask(betas) -> PositiveBetaMaps:
    """Keep strictly positive coefficients, zero elsewhere."""
    return PositiveBetaMaps(tuple(m.with_data(np.where(m.data > 0, m.data, 0.0)) for m in betas.maps))


def stack_maps(maps) -> Volume4D:
    """Pack P coefficient images into one Volume4D for storage."""
    return Volume4D(np.stack([m.data for m in maps]), maps[0].spacing)


def unstack_maps(vol: Volume4D) -> tuple:
    return tuple(vol.scan(k) for k in range(vol.n_scans))

"""
Phantom sessions with planted betas.

A phantom is a cube atlas, per-category beta images that are constant inside
chosen atlas cubes, an interleaved event schedule, and data
``F = D @ beta + noise`` where ``D`` comes from :func:`apa.glm.build_design_matrix`.
Every output is a pure function of the spec (including its seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from apa.glm import BetaMaps, Event, HrfParams, OnsetTable, build_design_matrix
from apa.register import (AffineTransform, geometry_center, params_to_transform, resample_trilinear,
                          rotation_matrix)
from apa.volume import AtlasVolume, Geometry, SessionMeta, Volume3D, Volume4D, atlas_from_cubes


def default_cubes(dims, size: int = 5, gap: int = 1) -> list:
    """Non-overlapping ``size``-cubes on a regular lattice, labelled 1..L."""
    cubes, label = [], 1
    starts = [list(range(gap, d - size + 1, size + gap)) for d in dims]
    for x in starts[0]:
        for y in starts[1]:
            for z in starts[2]:
                cubes.append(((x, y, z), (size, size, size), label))
                label += 1
    return cubes


def default_beta_pattern(n_categories: int, n_regions: int, amplitude: float = 1.5,
                         negative: float = -0.5) -> list:
    """Category p drives regions with ``(l - 1) % P == p`` and is suppressed in the next group."""
    pattern = []
    for p in range(n_categories):
        amp = {}
        for l in range(1, n_regions + 1):
            g = (l - 1) % n_categories
            if g == p:
                amp[l] = amplitude
            elif g == (p + 1) % n_categories:
                amp[l] = negative
        pattern.append(amp)
    return pattern


@dataclass(frozen=True)
class Corruption:
    bias_strength: float = 0.0
    transform: tuple = (0.0,) * 9  # params_to_transform vector


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (20, 20, 20)
    spacing: tuple = (3.0, 3.0, 3.0)
    n_categories: int = 4
    events_per_category: int | tuple = 10  # one count for all, or one per category
    tr: float = 2.0
    event_duration: float = 6.0
    isi: float = 16.0
    lead_in: float = 4.0
    tail: float = 24.0
    snr: float = 2.0
    atlas_cubes: tuple = ()
    beta_pattern: tuple = ()
    rng_seed: int = 0
    noise_rho: float = 0.0
    amplitude_jitter: float = 0.0
    categories: tuple = ()
    subject_id: str = "sub-01"
    session_id: str = "ses-01"
    corruption: Corruption | None = None

    def __post_init__(self):
        if not (self.snr > 0):
            raise ValueError("snr must be positive (use inf for noiseless)")
        if self.n_categories < 2:
            raise ValueError("a phantom needs at least two categories")
        counts = self.event_counts
        if len(counts) != self.n_categories or min(counts) < 1:
            raise ValueError("events_per_category must be >= 1 (one value, or one per category)")
        if not isinstance(self.events_per_category, int):
            object.__setattr__(self, "events_per_category", counts)
        if self.event_duration > self.isi:
            raise ValueError("event_duration exceeds isi: events would overlap")
        if not -1 < self.noise_rho < 1:
            raise ValueError("noise_rho must lie in (-1, 1)")
        Geometry(self.dims, self.spacing)
        cubes = tuple(self.atlas_cubes) or tuple(default_cubes(self.dims))
        cubes = tuple((tuple(map(int, o)), tuple(map(int, s)), int(l)) for o, s, l in cubes)
        for o, s, _ in cubes:
            if any(a < 0 or a + b > d for a, b, d in zip(o, s, self.dims)):
                raise ValueError(f"atlas cube {o}+{s} lies outside dims {self.dims}")
        object.__setattr__(self, "atlas_cubes", cubes)
        n_regions = max(l for _, _, l in cubes)
        pattern = tuple(self.beta_pattern) or tuple(default_beta_pattern(self.n_categories, n_regions))
        pattern = tuple({int(k): float(v) for k, v in amp.items()} for amp in pattern)
        if len(pattern) != self.n_categories:
            raise ValueError("beta_pattern needs one entry per category")
        object.__setattr__(self, "beta_pattern", pattern)
        cats = tuple(self.categories) or tuple(f"cat{p}" for p in range(self.n_categories))
        if len(cats) != self.n_categories:
            raise ValueError("categories must name every category")
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if isinstance(self.corruption, dict):
            object.__setattr__(self, "corruption", Corruption(**self.corruption))

    @property
    def event_counts(self) -> tuple:
        e = self.events_per_category
        if isinstance(e, (int, np.integer)):
            return (int(e),) * self.n_categories
        return tuple(int(v) for v in e)

    @property
    def n_scans(self) -> int:
        last = self.lead_in + (sum(self.event_counts) - 1) * self.isi
        return int(math.ceil((last + self.event_duration + self.tail) / self.tr))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["atlas_cubes"] = [[list(o), list(s), l] for o, s, l in self.atlas_cubes]
        d["beta_pattern"] = [{str(k): v for k, v in amp.items()} for amp in self.beta_pattern]
        d["snr"] = None if math.isinf(self.snr) else self.snr
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys {sorted(unknown)}")
        if "snr" in d and (d["snr"] is None or d["snr"] in ("inf", "Infinity")):
            d["snr"] = math.inf
        if isinstance(d.get("events_per_category"), list):
            d["events_per_category"] = tuple(d["events_per_category"])
        for key in ("dims", "spacing", "categories"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("corruption") is not None:
            c = dict(d["corruption"])
            c["transform"] = tuple(c.get("transform", (0.0,) * 9))
            d["corruption"] = Corruption(**c)
        return cls(**d)


@dataclass(frozen=True)
class Phantom:
    data: Volume4D
    onsets: OnsetTable
    atlas: AtlasVolume
    truth: BetaMaps
    meta: SessionMeta
    design: object


def planted_betas(spec: PhantomSpec, atlas: AtlasVolume, rng: np.random.Generator) -> np.ndarray:
    """(P, nx, ny, nz) array of planted coefficients."""
    out = np.zeros((spec.n_categories,) + spec.dims)
    for p, amp in enumerate(spec.beta_pattern):
        for label, a in amp.items():
            scale = 1.0 + spec.amplitude_jitter * rng.standard_normal() if spec.amplitude_jitter else 1.0
            out[p][atlas.labels == label] = a * scale
    return out


def event_schedule(spec: PhantomSpec, rng: np.random.Generator) -> OnsetTable:
    order = np.repeat(np.arange(spec.n_categories), spec.event_counts)
    rng.shuffle(order)
    counters = [0] * spec.n_categories
    events = []
    for i, p in enumerate(order):
        onset = spec.lead_in + i * spec.isi
        events.append(Event(onset, spec.event_duration, int(p), counters[p]))
        counters[p] += 1
    return OnsetTable(tuple(events), spec.n_categories)


def _ar1_noise(rng, shape, rho):
    w = rng.standard_normal(shape)
    if rho == 0.0:
        return w
    e = np.empty(shape)
    e[0] = w[0]
    c = math.sqrt(1.0 - rho * rho)
    for t in range(1, shape[0]):
        e[t] = rho * e[t - 1] + c * w[t]
    return e


def generate_phantom(spec: PhantomSpec, hrf: HrfParams = HrfParams()) -> Phantom:
    """Synthesize one session; noise sd = std(signal voxels of D @ beta) / snr."""
    rng = np.random.default_rng(spec.rng_seed)
    atlas = atlas_from_cubes(spec.dims, spec.atlas_cubes, spec.spacing)
    betas = planted_betas(spec, atlas, rng)
    onsets = event_schedule(spec, rng)
    N = spec.n_scans
    design = build_design_matrix(onsets, hrf, N, spec.tr)
    B = betas.reshape(spec.n_categories, -1)
    signal = design.values @ B
    active = np.any(B != 0, axis=0)
    if math.isinf(spec.snr) or not active.any():
        noise_sd = 0.0
        data = signal
    else:
        noise_sd = float(signal[:, active].std()) / spec.snr
        data = signal + noise_sd * _ar1_noise(rng, signal.shape, spec.noise_rho)
    vol = Volume4D(data.reshape((N,) + spec.dims), spec.spacing)
    if spec.corruption is not None:
        vol = corrupt_series(vol, spec.corruption)
    truth = BetaMaps(tuple(Volume3D(b, spec.spacing) for b in betas),
                     Volume3D(np.full(spec.dims, noise_sd ** 2), spec.spacing))
    meta = SessionMeta(spec.subject_id, spec.session_id, spec.tr, spec.categories)
    return Phantom(vol, onsets, atlas, truth, meta, design)


def generate_study(spec: PhantomSpec, n_subjects: int, hrf: HrfParams = HrfParams()) -> list:
    """``n_subjects`` phantoms sharing atlas and betas pattern, seeds spawned from the spec's."""
    seeds = np.random.SeedSequence(spec.rng_seed).generate_state(n_subjects)
    return [generate_phantom(replace(spec, rng_seed=int(s), subject_id=f"sub-{i + 1:02d}"), hrf)
            for i, s in enumerate(seeds)]


def bias_field(geom: Geometry, strength: float, direction=(1.0, 1.0, 1.0)) -> np.ndarray:
    """``1 + strength * g`` with g a linear ramp spanning [-1, 1] along ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    axes = [np.arange(n) * s for n, s in zip(geom.dims, geom.spacing)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    proj = (grid - geometry_center(geom)) @ d
    span = np.abs(proj).max()
    g = proj / span if span > 0 else np.zeros_like(proj)
    return 1.0 + strength * g


def corrupt_phantom(vol: Volume3D, transform: AffineTransform, bias_strength: float = 0.0,
                    direction=(1.0, 1.0, 1.0)) -> Volume3D:
    """Move ``vol`` by ``transform`` and multiply by a smooth bias field."""
    moved = resample_trilinear(vol, transform, vol.geometry)
    if bias_strength == 0.0:
        return moved
    return moved.with_data(moved.data * bias_field(vol.geometry, bias_strength, direction))


def corrupt_series(vol: Volume4D, corruption: Corruption) -> Volume4D:
    geom = vol.frame
    t = params_to_transform(corruption.transform, geometry_center(geom))
    scans = [corrupt_phantom(vol.scan(k), t, corruption.bias_strength).data for k in range(vol.n_scans)]
    return Volume4D(np.stack(scans), vol.spacing)


def reference_template(atlas: AtlasVolume, smooth: float = 0.7, seed: int = 0) -> Volume3D:
    """Anatomy-like image: a distinct intensity per region over a dim brain mask."""
    rng = np.random.default_rng(seed)
    L = atlas.n_regions
    levels = np.concatenate([[0.0], 1.0 + rng.permutation(L) / max(L, 1) * 2.0])
    img = levels[atlas.labels]
    if smooth > 0:
        img = ndimage.gaussian_filter(img, smooth, mode="constant")
    return Volume3D(img, atlas.spacing)


def blob_phantom(dims=(24, 24, 24), spacing=(1.0, 1.0, 1.0), n_blobs: int = 8, seed: int = 0,
                 edge: float = 0.6, transform: AffineTransform | None = None) -> Volume3D:
    """Overlapping randomly oriented ellipsoids with soft edges of width ``edge`` voxels.

    Sharp, anisotropic structure keeps rotations identifiable.  With
    ``transform`` the same object is rendered after moving it by that map,
    evaluated analytically so no interpolation enters the moved image.
    """
    rng = np.random.default_rng(seed)
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if transform is not None:
        pts = transform.inverse().apply(pts)
    pts = pts / np.asarray(spacing, dtype=np.float64)
    dims_a = np.asarray(dims, dtype=np.float64)
    img = np.zeros(tuple(dims))
    for _ in range(n_blobs):
        c = rng.uniform(0.25, 0.75, 3) * (dims_a - 1)
        radii = rng.uniform(0.08, 0.25, 3) * dims_a
        rot = rotation_matrix(rng.uniform(-90, 90, 3))
        local = (pts - c) @ rot
        r = np.sqrt(np.sum((local / radii) ** 2, axis=-1))
        dist = (r - 1.0) * radii.min()
        img += rng.uniform(0.5, 1.5) / (1.0 + np.exp(dist / edge))
    return Volume3D(img, spacing)


def save_spec(spec: PhantomSpec, path, n_subjects: int = 1) -> None:
    d = spec.to_dict()
    d["n_subjects"] = n_subjects
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_spec(path):
    """Returns ``(PhantomSpec, n_subjects)`` from a JSON file."""
    d = json.loads(Path(path).read_text())
    n_subjects = int(d.pop("n_subjects", 1))
    return PhantomSpec.from_dict(d), n_subjects

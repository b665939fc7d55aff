"""
Dense 3D/4D volumes, integer atlases and the ``APAV1`` binary format.

Arrays are held in memory as float64 with axis order ``(x, y, z)`` (4D:
``(scan, x, y, z)``).  On disk the payload is written x-fastest, i.e. the
Fortran-order ravel of the spatial block, as little-endian float32 (uint32
for atlases).  A volume whose values are float32-representable therefore
survives ``load_volume(save_volume(v))`` bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MAGIC = b"APAV1\0"
KIND_VOL3D = 0
KIND_VOL4D = 1
KIND_ATLAS = 2

# magic, kind u8, nx ny nz n_scans u32, sx sy sz f32
_HEADER = struct.Struct("<6sB4I3f")


class VolumeError(ValueError):
    """Base class for volume construction and decoding failures."""

    code = "volume_error"


class MalformedHeaderError(VolumeError):
    code = "malformed_header"


class PayloadLengthError(VolumeError):
    code = "length_mismatch"


class NonFiniteError(VolumeError):
    code = "non_finite"


class GeometryMismatchError(VolumeError):
    code = "geometry_mismatch"


@dataclass(frozen=True)
class Geometry:
    """Grid shape and voxel size (mm) shared by co-registered volumes."""

    dims: tuple
    spacing: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise VolumeError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A single scalar image."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise VolumeError(f"Volume3D needs a 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("Volume3D data contains non-finite values")
        geom = Geometry(data.shape, self.spacing)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", geom.spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing)

    def with_data(self, data) -> "Volume3D":
        return Volume3D(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (self.spacing == other.spacing and self.dims == other.dims
                and self.data.tobytes() == other.data.tobytes())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Volume4D:
    """A time series of N scans sharing one frame geometry."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 4 or data.shape[0] < 1:
            raise VolumeError(f"Volume4D needs a (N, nx, ny, nz) array with N >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("Volume4D data contains non-finite values")
        geom = Geometry(data.shape[1:], self.spacing)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", geom.spacing)

    @property
    def n_scans(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]

    @property
    def frame(self) -> Geometry:
        return Geometry(self.dims, self.spacing)

    geometry = frame

    def scan(self, k: int) -> Volume3D:
        return Volume3D(self.data[k], self.spacing)

    def as_matrix(self) -> np.ndarray:
        """Scans x voxels view (voxels in C order of the in-memory array)."""
        return self.data.reshape(self.n_scans, -1)

    def __eq__(self, other):
        if not isinstance(other, Volume4D):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AtlasVolume:
    """Integer label image: 0 is background, 1..L are regions.

    The number of regions ``L`` is the largest label present, so a label
    skipped inside ``1..L`` is an empty region.
    """

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    atlas_id: str = field(default="atlas", compare=False)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise VolumeError(f"AtlasVolume needs a 3D array, got shape {raw.shape}")
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise VolumeError("atlas labels must be integers")
        if raw.size and (raw.min() < 0 or raw.max() > np.iinfo(np.uint32).max):
            raise VolumeError("atlas labels must fit in uint32")
        labels = np.array(raw, dtype=np.int64, copy=True)
        geom = Geometry(labels.shape, self.spacing)
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "spacing", geom.spacing)

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing)

    @property
    def n_regions(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def region_sizes(self) -> np.ndarray:
        """``|A_l|`` for l = 1..L."""
        return np.bincount(self.labels.ravel(), minlength=self.n_regions + 1)[1:]

    def __eq__(self, other):
        if not isinstance(other, AtlasVolume):
            return NotImplemented
        return (self.spacing == other.spacing and self.dims == other.dims
                and np.array_equal(self.labels, other.labels))

    __hash__ = None


AnyVolume = Union[Volume3D, Volume4D, AtlasVolume]


@dataclass(frozen=True)
class SessionMeta:
    subject_id: str
    session_id: str
    tr_seconds: float
    categories: tuple

    def __post_init__(self):
        cats = tuple(str(c) for c in self.categories)
        if len(set(cats)) != len(cats):
            raise ValueError(f"category names must be unique: {cats}")
        if not self.tr_seconds > 0:
            raise ValueError(f"tr_seconds must be positive, got {self.tr_seconds}")
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "tr_seconds", float(self.tr_seconds))

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def to_dict(self) -> dict:
        return {"subject_id": self.subject_id, "session_id": self.session_id,
                "tr_seconds": self.tr_seconds, "categories": list(self.categories)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SessionMeta":
        d = json.loads(Path(path).read_text())
        missing = {"subject_id", "session_id", "tr_seconds", "categories"} - set(d)
        if missing:
            raise ValueError(f"{path}: session sidecar missing keys {sorted(missing)}")
        return cls(str(d["subject_id"]), str(d["session_id"]), d["tr_seconds"], d["categories"])


def check_same_geometry(a, b, what: str = "volumes") -> None:
    if tuple(a.dims) != tuple(b.dims) or tuple(a.spacing) != tuple(b.spacing):
        raise GeometryMismatchError(
            f"{what}: geometry mismatch {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def _spatial_to_disk(block: np.ndarray) -> np.ndarray:
    # x-fastest: Fortran ravel of (x, y, z)
    return block.ravel(order="F")


def encode_volume(vol: AnyVolume) -> bytes:
    """Serialize a volume to ``APAV1`` bytes."""
    sx, sy, sz = vol.spacing
    if isinstance(vol, AtlasVolume):
        kind, n_scans = KIND_ATLAS, 1
        payload = _spatial_to_disk(vol.labels).astype("<u4").tobytes()
    elif isinstance(vol, Volume4D):
        kind, n_scans = KIND_VOL4D, vol.n_scans
        payload = b"".join(_spatial_to_disk(s).astype("<f4").tobytes() for s in vol.data)
    elif isinstance(vol, Volume3D):
        kind, n_scans = KIND_VOL3D, 1
        payload = _spatial_to_disk(vol.data).astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot encode {type(vol).__name__}")
    nx, ny, nz = vol.dims
    return _HEADER.pack(MAGIC, kind, nx, ny, nz, n_scans, sx, sy, sz) + payload


def decode_volume(buf: bytes, source: str = "<bytes>") -> AnyVolume:
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, kind, nx, ny, nz, n_scans, sx, sy, sz = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{source}: bad magic {magic!r}")
    if kind not in (KIND_VOL3D, KIND_VOL4D, KIND_ATLAS):
        raise MalformedHeaderError(f"{source}: unknown kind {kind}")
    if min(nx, ny, nz, n_scans) < 1 or (kind != KIND_VOL4D and n_scans != 1):
        raise MalformedHeaderError(f"{source}: invalid dims {(nx, ny, nz)} / n_scans {n_scans}")
    if not all(np.isfinite(s) and s > 0 for s in (sx, sy, sz)):
        raise MalformedHeaderError(f"{source}: invalid spacing {(sx, sy, sz)}")
    spacing = (float(sx), float(sy), float(sz))
    n_vox = nx * ny * nz
    expected = n_vox * n_scans * 4
    payload = memoryview(buf)[_HEADER.size:]
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{source}: payload is {len(payload)} bytes, header implies {expected}")
    if kind == KIND_ATLAS:
        flat = np.frombuffer(payload, dtype="<u4")
        return AtlasVolume(flat.reshape((nx, ny, nz), order="F"), spacing,
                           atlas_id=Path(source).stem if source != "<bytes>" else "atlas")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError(f"{source}: payload contains non-finite values")
    if kind == KIND_VOL3D:
        return Volume3D(flat.reshape((nx, ny, nz), order="F"), spacing)
    scans = flat.reshape(n_scans, n_vox)
    block = np.stack([s.reshape((nx, ny, nz), order="F") for s in scans])
    return Volume4D(block, spacing)


def save_volume(vol: AnyVolume, path) -> None:
    path = Path(path)
    data = encode_volume(vol)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"failed to write volume to {path}: {exc}") from exc


def load_volume(path) -> AnyVolume:
    path = Path(path)
    return decode_volume(path.read_bytes(), source=os.fspath(path))


def region_index(atlas: AtlasVolume, region: int) -> np.ndarray:
    """Voxel indices ``[x, y, z]`` carrying ``region``, lexicographically sorted.

    Returns an ``(n, 3)`` integer array; ``n`` may be zero.
    """
    L = atlas.n_regions
    if not 1 <= region <= max(L, 1):
        raise ValueError(f"region {region} outside 1..{L}")
    # np.argwhere walks C order over (x, y, z), which is lexicographic.
    return np.argwhere(atlas.labels == region)


def atlas_from_cubes(dims: Sequence[int], cubes, spacing=(1.0, 1.0, 1.0),
                     atlas_id: str = "phantom") -> AtlasVolume:
    """Build an atlas from ``(origin, size, label)`` boxes; later boxes win."""
    labels = np.zeros(tuple(dims), dtype=np.int64)
    for origin, size, label in cubes:
        sl = tuple(slice(int(o), int(o) + int(s)) for o, s in zip(origin, size))
        if any(int(o) < 0 or int(o) + int(s) > d for o, s, d in zip(origin, size, dims)):
            raise ValueError(f"cube {origin}+{size} outside dims {tuple(dims)}")
        labels[sl] = int(label)
    return AtlasVolume(labels, spacing, atlas_id=atlas_id)

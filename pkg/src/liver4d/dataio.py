"""Geometry model, on-disk dataset layout and resampling to the canonical grids.

Arrays follow the canonical axis convention ``(sagittal index, row, column)``.
The sagittal index increases toward the subject's left (+x in DICOM LPS
patient coordinates), rows run superior to inferior and columns anterior to
posterior.  A plane offset is the signed distance (mm) of a sagittal plane
from the navigator plane, positive toward the subject's left.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

SLICE_PERIOD_MS = 166.0
CANONICAL_SPACING = 1.8
CANONICAL_SLICE_SHAPE = (128, 128)
CANONICAL_VOLUME_SHAPE = (209, 128, 128)

# columns: sagittal axis -> +x (left), rows -> -z (inferior), cols -> +y (posterior)
SAGITTAL_DIRECTION = np.array(
    [[1.0, 0.0, 0.0],
     [0.0, 0.0, 1.0],
     [0.0, -1.0, 0.0]]
)

_SNAP_TOL = 1e-6


class GeometryError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


class SequenceError(ValueError):
    pass


@dataclass
class Geometry:
    """Placement of an image in scanner coordinates (mm).

    ``direction[:, k]`` is the unit vector of array axis ``k``; for 2D slices
    the third column is the plane normal.  ``spacing`` has one entry per array
    axis.
    """

    origin: np.ndarray
    spacing: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: SAGITTAL_DIRECTION.copy())
    timestamp: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(-1)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        if self.spacing.size not in (2, 3):
            raise GeometryError(f"spacing must have 2 or 3 entries, got {self.spacing.size}")
        if not np.all(np.isfinite(self.spacing)) or np.any(self.spacing <= 0):
            raise GeometryError(f"spacing must be positive, got {self.spacing.tolist()}")
        gram = self.direction.T @ self.direction
        if not np.allclose(gram, np.eye(3), atol=1e-6, rtol=0):
            raise GeometryError("direction columns are not orthonormal")
        if self.timestamp is not None:
            self.timestamp = float(self.timestamp)

    @property
    def ndim(self) -> int:
        return self.spacing.size

    @property
    def normal(self) -> np.ndarray:
        return self.direction[:, 2]

    def index_to_physical(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.float64)
        axes = self.direction[:, : self.ndim]
        return self.origin + (index * self.spacing) @ axes.T

    def physical_to_index(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=np.float64)
        axes = self.direction[:, : self.ndim]
        return ((point - self.origin) @ axes) / self.spacing

    def affine_to(self, other: "Geometry") -> tuple[np.ndarray, np.ndarray]:
        """Return ``(A, b)`` with ``index_in_self = A @ index_in_other + b``."""
        mine = self.direction[:, : self.ndim]
        theirs = other.direction[:, : other.ndim]
        A = (mine.T @ theirs) * other.spacing[None, :] / self.spacing[:, None]
        b = (mine.T @ (other.origin - self.origin)) / self.spacing
        return A, b

    def with_timestamp(self, timestamp: float | None) -> "Geometry":
        return Geometry(self.origin.copy(), self.spacing.copy(), self.direction.copy(), timestamp)

    def same_grid(self, other: "Geometry", atol: float = 1e-6) -> bool:
        return (
            self.ndim == other.ndim
            and np.allclose(self.origin, other.origin, atol=atol, rtol=0)
            and np.allclose(self.spacing, other.spacing, atol=atol, rtol=0)
            and np.allclose(self.direction, other.direction, atol=atol, rtol=0)
        )


@dataclass
class Slice2D:
    pixels: np.ndarray
    geometry: Geometry
    plane_offset: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"Slice2D needs a 2D array, got shape {self.pixels.shape}")
        if self.geometry.ndim != 2:
            raise GeometryError("Slice2D geometry must have 2 spacings")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("slice pixels contain NaN or Inf")

    @property
    def timestamp(self) -> float | None:
        return self.geometry.timestamp

    @property
    def plane_position(self) -> float:
        """Position of the plane along its normal (mm)."""
        return float(self.geometry.origin @ self.geometry.normal)


@dataclass
class Volume3D:
    voxels: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"Volume3D needs a 3D array, got shape {self.voxels.shape}")
        if self.geometry.ndim != 3:
            raise GeometryError("Volume3D geometry must have 3 spacings")

    def sagittal_position(self, index: float) -> float:
        """Scanner position (mm) of sagittal slice ``index`` along axis 0."""
        axis = self.geometry.direction[:, 0]
        return float(self.geometry.origin @ axis + index * self.geometry.spacing[0])


@dataclass
class InterleavedSequence:
    """Alternating navigator/data frames.

    ``navigator_offset`` and ``data_offset`` are plane positions (mm) along
    the sagittal axis; frame ``plane_offset`` values are relative to the
    navigator plane.
    """

    frames: list[Slice2D]
    navigator_offset: float
    data_offset: float

    @property
    def relative_offset(self) -> float:
        return self.data_offset - self.navigator_offset

    def __len__(self):
        return len(self.frames)


@dataclass
class ReferenceSequence:
    frames: list[Slice2D]
    navigator_offset: float

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------- grids


def canonical_volume_geometry(center=(0.0, 0.0, 0.0), shape=CANONICAL_VOLUME_SHAPE,
                              spacing=CANONICAL_SPACING,
                              direction=SAGITTAL_DIRECTION) -> Geometry:
    """Canonical sagittal volume grid whose central voxel sits at ``center``."""
    shape = np.asarray(shape, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    direction = np.asarray(direction, dtype=np.float64)
    origin = np.asarray(center, dtype=np.float64) - direction @ ((shape - 1) / 2 * spacing)
    return Geometry(origin, spacing, direction)


def volume_slice_geometry(volume_geometry: Geometry, index: float) -> Geometry:
    """In-plane grid of sagittal slice ``index`` of a volume grid."""
    g = volume_geometry
    origin = g.origin + g.direction[:, 0] * (index * g.spacing[0])
    direction = np.column_stack([g.direction[:, 1], g.direction[:, 2], g.direction[:, 0]])
    return Geometry(origin, g.spacing[1:].copy(), direction)


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) < _SNAP_TOL, nearest, coords)


def _resample(array: np.ndarray, source: Geometry, target: Geometry, shape) -> np.ndarray:
    if abs(np.linalg.det(source.direction)) < 0.5 or abs(np.linalg.det(target.direction)) < 0.5:
        raise GeometryError("degenerate direction matrix")
    A, b = source.affine_to(target)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    out_index = np.stack([g.ravel() for g in grids])
    coords = _snap(A @ out_index + b[:, None])
    values = ndimage.map_coordinates(
        np.asarray(array, dtype=np.float32), coords, order=1, mode="constant", cval=0.0,
        prefilter=False,
    )
    return values.reshape(shape).astype(np.float32)


def resample_slice(slice_: Slice2D, target: Geometry, shape=CANONICAL_SLICE_SHAPE) -> Slice2D:
    """Bilinear resampling of a slice onto ``target``; pixels outside support become 0.

    Target pixel centres are projected onto the source plane, so the two grids
    must describe (nearly) the same plane.
    """
    if target.ndim != 2:
        raise GeometryError("target grid for a slice needs 2 spacings")
    pixels = _resample(slice_.pixels, slice_.geometry, target, tuple(shape))
    return Slice2D(pixels, target.with_timestamp(slice_.geometry.timestamp), slice_.plane_offset)


def resample_volume(volume: Volume3D, target: Geometry, shape=CANONICAL_VOLUME_SHAPE) -> Volume3D:
    if target.ndim != 3:
        raise GeometryError("target grid for a volume needs 3 spacings")
    voxels = _resample(volume.voxels, volume.geometry, target, tuple(shape))
    return Volume3D(voxels, target.with_timestamp(None))


def slice_index_for_offset(volume: Volume3D, plane_offset: float, navigator_position: float) -> int:
    """Nearest sagittal index of the plane ``plane_offset`` mm from the navigator."""
    g = volume.geometry
    start = float(g.origin @ g.direction[:, 0])
    position = navigator_position + plane_offset
    index = int(np.round((position - start) / g.spacing[0]))
    if not 0 <= index < volume.voxels.shape[0]:
        raise OutOfBoundsError(
            f"plane at offset {plane_offset:+.2f} mm (index {index}) lies outside the volume "
            f"(0..{volume.voxels.shape[0] - 1})"
        )
    return index


def extract_volume_slice(volume: Volume3D, plane_offset: float, navigator_position: float) -> Slice2D:
    index = slice_index_for_offset(volume, plane_offset, navigator_position)
    geometry = volume_slice_geometry(volume.geometry, index)
    return Slice2D(volume.voxels[index], geometry, float(plane_offset))


def pair_frames(seq: InterleavedSequence, tol: float = 0.5) -> list[tuple[Slice2D, Slice2D]]:
    """Split an interleaved sequence into ``(navigator, label)`` pairs in temporal order."""
    frames = list(seq.frames)
    if len(frames) % 2:
        warnings.warn("odd frame count, dropping trailing navigator", stacklevel=2)
        frames = frames[:-1]
    relative = seq.relative_offset
    for i, frame in enumerate(frames):
        expected = 0.0 if i % 2 == 0 else relative
        offset = frame.plane_offset
        if offset is None:
            offset = frame.plane_position - seq.navigator_offset
        if abs(offset - expected) > tol:
            kind = "navigator" if i % 2 == 0 else "data"
            raise SequenceError(
                f"frame {i} expected on the {kind} plane ({expected:+.2f} mm), found {offset:+.2f} mm"
            )
    return [(frames[2 * i], frames[2 * i + 1]) for i in range(len(frames) // 2)]


# ---------------------------------------------------------------- array files


def _sidecar(array: np.ndarray, geometry: Geometry | None, plane_offset=None) -> dict:
    meta = {
        "shape": list(array.shape),
        "spacing_mm": None,
        "origin_mm": None,
        "direction": None,
        "timestamp_ms": None,
        "plane_offset_mm": None if plane_offset is None else float(plane_offset),
    }
    if geometry is not None:
        meta["spacing_mm"] = geometry.spacing.tolist()
        meta["origin_mm"] = geometry.origin.tolist()
        meta["direction"] = geometry.direction.reshape(-1).tolist()
        meta["timestamp_ms"] = geometry.timestamp
    return meta


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_array(path, array: np.ndarray, geometry: Geometry | None = None, plane_offset=None,
                extra: dict | None = None) -> Path:
    """Write ``<path>.raw`` (little-endian float32, C order) plus ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array, dtype="<f4")
    path.with_suffix(".raw").write_bytes(array.tobytes(order="C"))
    meta = _sidecar(array, geometry, plane_offset)
    if extra:
        meta.update(extra)
    write_json(path.with_suffix(".json"), meta)
    return path.with_suffix(".raw")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def read_array(path, mmap: bool = False) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = read_sidecar(path)
    shape = tuple(meta["shape"])
    raw = path.with_suffix(".raw")
    expected = int(np.prod(shape)) * 4
    if raw.stat().st_size != expected:
        raise OSError(f"{raw}: expected {expected} bytes for shape {shape}, found {raw.stat().st_size}")
    if mmap:
        array = np.memmap(raw, dtype="<f4", mode="r", shape=shape)
    else:
        array = np.fromfile(raw, dtype="<f4").reshape(shape)
    return array, meta


def geometry_from_sidecar(meta: dict) -> Geometry:
    return Geometry(meta["origin_mm"], meta["spacing_mm"], np.reshape(meta["direction"], (3, 3)),
                    meta.get("timestamp_ms"))


def write_slice(path, s: Slice2D) -> Path:
    return write_array(path, s.pixels, s.geometry, s.plane_offset)


def read_slice(path) -> Slice2D:
    pixels, meta = read_array(path)
    return Slice2D(pixels, geometry_from_sidecar(meta), meta.get("plane_offset_mm"))


def write_volume(path, v: Volume3D) -> Path:
    return write_array(path, v.voxels, v.geometry)


def read_volume(path) -> Volume3D:
    voxels, meta = read_array(path)
    return Volume3D(voxels, geometry_from_sidecar(meta))


# ---------------------------------------------------------------- dataset layout


def offset_dirname(offset_mm: float) -> str:
    return f"{offset_mm:+.1f}"


def subject_dir(root, subject_id: str) -> Path:
    return Path(root) / "subject" / str(subject_id)


def list_subjects(root) -> list[str]:
    base = Path(root) / "subject"
    if not base.is_dir():
        return []
    return sorted(p.name for p in base.iterdir() if p.is_dir())


def _frame_name(i: int) -> str:
    return f"frame_{i:05d}"


def write_frames(directory: Path, frames: Sequence[Slice2D]) -> None:
    for i, frame in enumerate(frames):
        write_slice(directory / _frame_name(i), frame)


def read_frames(directory: Path) -> list[Slice2D]:
    return [read_slice(p) for p in sorted(Path(directory).glob("frame_*.raw"))]


def write_subject(root, subject_id: str, volume: Volume3D, reference: ReferenceSequence | None,
                  sequences: Iterable[InterleavedSequence]) -> Path:
    """Write one subject in the dataset layout; returns the subject directory."""
    base = subject_dir(root, subject_id)
    write_volume(base / "volume" / "volume", volume)
    if reference is not None:
        write_frames(base / "reference", reference.frames)
        write_json(base / "reference" / "sequence.json",
                   {"navigator_offset_mm": reference.navigator_offset, "n_frames": len(reference)})
    for seq in sequences:
        d = base / "interleaved" / offset_dirname(seq.relative_offset)
        write_frames(d, seq.frames)
        write_json(d / "sequence.json", {
            "navigator_offset_mm": seq.navigator_offset,
            "data_offset_mm": seq.data_offset,
            "n_frames": len(seq),
        })
    return base


def read_static_volume(root, subject_id: str) -> Volume3D:
    return read_volume(subject_dir(root, subject_id) / "volume" / "volume")


def read_reference(root, subject_id: str) -> ReferenceSequence | None:
    d = subject_dir(root, subject_id) / "reference"
    if not d.is_dir():
        return None
    meta = json.loads((d / "sequence.json").read_text())
    return ReferenceSequence(read_frames(d), meta["navigator_offset_mm"])


def list_interleaved(root, subject_id: str) -> list[Path]:
    d = subject_dir(root, subject_id) / "interleaved"
    if not d.is_dir():
        return []
    dirs = [p for p in d.iterdir() if (p / "sequence.json").exists()]
    return sorted(dirs, key=lambda p: float(p.name))


def read_interleaved(directory) -> InterleavedSequence:
    directory = Path(directory)
    meta = json.loads((directory / "sequence.json").read_text())
    return InterleavedSequence(read_frames(directory), meta["navigator_offset_mm"], meta["data_offset_mm"])


def count_pairs(root, subject_id: str) -> int:
    """Number of ``(navigator, label)`` pairs discoverable on disk for a subject."""
    total = 0
    for d in list_interleaved(root, subject_id):
        total += len(list(d.glob("frame_*.raw"))) // 2
    return total


# ---------------------------------------------------------------- canonical grids


def canonical_grid_for(volume: Volume3D, shape=CANONICAL_VOLUME_SHAPE, spacing=CANONICAL_SPACING) -> Geometry:
    """Canonical sagittal grid centred on the centre of ``volume``."""
    centre = volume.geometry.index_to_physical((np.asarray(volume.voxels.shape, dtype=np.float64) - 1) / 2)
    return canonical_volume_geometry(centre, shape, spacing)


def canonical_slice_geometry(volume_geometry: Geometry, slice_: Slice2D) -> Geometry:
    """In-plane grid of ``volume_geometry`` at the (continuous) sagittal position of ``slice_``."""
    index = float(volume_geometry.physical_to_index(slice_.geometry.origin)[0])
    return volume_slice_geometry(volume_geometry, index)


def canonicalize_slice(slice_: Slice2D, volume_geometry: Geometry, shape=CANONICAL_SLICE_SHAPE) -> Slice2D:
    target = canonical_slice_geometry(volume_geometry, slice_)
    if slice_.pixels.shape == tuple(shape) and slice_.geometry.same_grid(target):
        return slice_
    return resample_slice(slice_, target, shape)


def canonicalize_volume(volume: Volume3D, shape=CANONICAL_VOLUME_SHAPE,
                        spacing=CANONICAL_SPACING) -> Volume3D:
    """Resample onto the canonical grid; a volume already on it is returned unchanged."""
    target = canonical_grid_for(volume, shape, spacing)
    if volume.voxels.shape == tuple(shape) and volume.geometry.same_grid(target):
        return volume
    return resample_volume(volume, target, shape)

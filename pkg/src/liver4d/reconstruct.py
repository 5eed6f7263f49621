"""Volume and 4D reconstruction: one batch per navigator, one entry per sagittal slice."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dataio
from .dataio import SLICE_PERIOD_MS, Geometry, Slice2D, Volume3D
from .model import UNet, forward
from .preprocess import NormalizationStats, denormalize, normalize

log = logging.getLogger(__name__)

REPORTED_SECONDS_PER_VOLUME = 0.6


class ReconstructionError(ValueError):
    pass


@dataclass
class VolumeBatch:
    inputs: np.ndarray               # (S, H, W, 3)
    navigator_timestamp: float | None
    subject_id: str = "S1"
    navigator_index: int = 0


def _check_navigator(navigator: Slice2D, volume: Volume3D, atol: float = 1e-3) -> int:
    """Sagittal index of the navigator plane; the navigator must lie on the volume's in-plane grid."""
    g = volume.geometry
    ng = navigator.geometry
    if navigator.pixels.shape != volume.voxels.shape[1:]:
        raise ReconstructionError(
            f"navigator shape {navigator.pixels.shape} does not match volume slices {volume.voxels.shape[1:]}"
        )
    if not (np.allclose(ng.direction[:, 0], g.direction[:, 1], atol=atol)
            and np.allclose(ng.direction[:, 1], g.direction[:, 2], atol=atol)
            and np.allclose(ng.spacing, g.spacing[1:], atol=atol)):
        raise ReconstructionError("navigator grid is not aligned with the static volume grid")
    index_f = g.physical_to_index(ng.origin)
    if np.any(np.abs(index_f[1:]) > 1e-2):
        raise ReconstructionError("navigator in-plane origin does not match the static volume grid")
    index = int(np.round(index_f[0]))
    if not 0 <= index < volume.voxels.shape[0]:
        raise ReconstructionError("navigator plane lies outside the static volume")
    return index


def build_volume_batch(navigator: Slice2D, static_volume: Volume3D, stats: NormalizationStats,
                       normalized: bool = False, subject_id: str = "S1",
                       slice_indices: Sequence[int] | None = None) -> VolumeBatch:
    """One entry per sagittal slice: same navigator and reference slice, varying target slice.

    ``slice_indices`` restricts the batch to a subset of positions; entry
    ``k`` then corresponds to ``slice_indices[k]``.
    """
    nav_index = _check_navigator(navigator, static_volume)
    vol = normalize(static_volume, stats)
    nav = navigator.pixels.astype(np.float32) if normalized else normalize(navigator, stats)
    indices = np.arange(vol.shape[0]) if slice_indices is None else np.asarray(slice_indices)
    s = indices.size
    inputs = np.empty((s,) + vol.shape[1:] + (3,), dtype=np.float32)
    inputs[..., 0] = nav
    inputs[..., 1] = vol[nav_index]
    inputs[..., 2] = vol[indices]
    return VolumeBatch(inputs, navigator.timestamp, subject_id, nav_index)


def predict_volume(model: UNet, batch: VolumeBatch, stats: NormalizationStats,
                   geometry: Geometry) -> tuple[Volume3D, float]:
    """Predict every slice in one forward call and stack them on the static volume grid.

    Returns the denormalized volume and the wall time in seconds.
    """
    start = time.perf_counter()
    slices = forward(model, batch.inputs)[..., 0]
    elapsed = time.perf_counter() - start
    volume = Volume3D(denormalize(slices, stats), geometry.with_timestamp(None))
    log.info("predicted %d slices in %.3f s (reference %.1f s/volume)", len(slices), elapsed,
             REPORTED_SECONDS_PER_VOLUME)
    return volume, elapsed


@dataclass
class Reconstruction4D:
    volumes: np.ndarray                       # (T, S, H, W), may be a memmap
    timestamps: np.ndarray                    # (T,) ms, navigator time + one frame period
    geometry: Geometry
    provenance: dict = field(default_factory=dict)
    timing_s: list[float] = field(default_factory=list)

    def __len__(self):
        return int(self.volumes.shape[0])


def reconstruct_4d(model: UNet, navigators: Sequence[Slice2D] | Iterable[Slice2D], static_volume: Volume3D,
                   stats: NormalizationStats, stride: int = 1, out_path=None,
                   provenance: dict | None = None) -> Reconstruction4D:
    """Predict one volume per selected navigator frame, in temporal order.

    With ``out_path`` the volumes stream into a float32 memmap file there
    instead of memory.  Each volume is stamped with its navigator's timestamp
    plus one frame period, the time of the data slice it stands for.
    """
    if stride < 1:
        raise ReconstructionError("stride must be >= 1")
    frames = list(navigators)[::stride]
    if not frames:
        raise ReconstructionError("empty navigator sequence")
    shape = (len(frames),) + static_volume.voxels.shape
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        volumes = np.lib.format.open_memmap(out_path, mode="w+", dtype=np.float32, shape=shape)
    else:
        volumes = np.empty(shape, dtype=np.float32)
    timestamps, timing = [], []
    for t, nav in enumerate(frames):
        batch = build_volume_batch(nav, static_volume, stats)
        vol, elapsed = predict_volume(model, batch, stats, static_volume.geometry)
        volumes[t] = vol.voxels
        stamp = nav.timestamp if nav.timestamp is not None else t * stride * SLICE_PERIOD_MS
        timestamps.append(stamp + SLICE_PERIOD_MS)
        timing.append(elapsed)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if np.any(np.diff(timestamps) <= 0):
        raise ReconstructionError("navigator timestamps are not strictly increasing")
    return Reconstruction4D(volumes, timestamps, static_volume.geometry.with_timestamp(None),
                            dict(provenance or {}, stride=stride), timing)


def export_reconstruction(recon: Reconstruction4D, path, format: str = "files") -> Path:
    """Write a reconstruction and its ``index.json``.

    ``format="files"`` writes one array+sidecar pair per volume
    (``volume_00000.raw``...); ``format="container"`` writes a single
    ``volumes.raw`` of shape ``(T, S, H, W)`` with the same sidecar schema.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    if format == "files":
        for t in range(len(recon)):
            geometry = recon.geometry.with_timestamp(float(recon.timestamps[t]))
            name = f"volume_{t:05d}"
            dataio.write_array(path / name, recon.volumes[t], geometry)
            entries.append({"path": name + ".raw", "timestamp_ms": float(recon.timestamps[t])})
    elif format == "container":
        dataio.write_array(path / "volumes", np.asarray(recon.volumes), recon.geometry)
        entries = [{"path": "volumes.raw", "index": t, "timestamp_ms": float(ts)}
                   for t, ts in enumerate(recon.timestamps)]
    else:
        raise ValueError(f"unknown export format {format!r}")
    dataio.write_json(path / "index.json", {
        "format": format,
        "n_volumes": len(recon),
        "volumes": entries,
        "provenance": recon.provenance,
    })
    return path


def import_reconstruction(path) -> Reconstruction4D:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    timestamps = np.array([e["timestamp_ms"] for e in index["volumes"]], dtype=np.float64)
    if index["format"] == "files":
        arrays, geometry = [], None
        for e in index["volumes"]:
            arr, meta = dataio.read_array(path / e["path"])
            arrays.append(arr)
            geometry = dataio.geometry_from_sidecar(meta).with_timestamp(None)
        volumes = np.stack(arrays)
    else:
        volumes, meta = dataio.read_array(path / "volumes")
        geometry = dataio.geometry_from_sidecar(meta)
    return Reconstruction4D(volumes, timestamps, geometry, index.get("provenance", {}))

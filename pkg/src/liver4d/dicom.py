"""Import of single DICOM series into volumes or navigator sequences."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError

from .dataio import Geometry, InterleavedSequence, ReferenceSequence, Slice2D, Volume3D

log = logging.getLogger(__name__)

PLANE_TOLERANCE_MM = 0.5

REQUIRED_TAGS = {
    "ImagePositionPatient": "(0020,0032)",
    "ImageOrientationPatient": "(0020,0037)",
    "PixelSpacing": "(0028,0030)",
    "SliceThickness": "(0018,0050)",
    "AcquisitionTime": "(0008,0032)",
    "SeriesInstanceUID": "(0020,000E)",
}


class DicomImportError(ValueError):
    pass


def parse_dicom_time(value: str) -> float:
    """``HHMMSS.FFFFFF`` to milliseconds since midnight."""
    text = str(value).strip()
    if not text:
        raise DicomImportError("empty AcquisitionTime")
    whole, _, frac = text.partition(".")
    whole = whole.ljust(6, "0")
    hours, minutes, seconds = int(whole[0:2]), int(whole[2:4]), int(whole[4:6])
    fraction = float("0." + frac) if frac else 0.0
    return ((hours * 60 + minutes) * 60 + seconds + fraction) * 1000.0


def _read_series(directory: Path) -> list[pydicom.Dataset]:
    datasets = []
    for path in sorted(p for p in Path(directory).iterdir() if p.is_file()):
        try:
            datasets.append(pydicom.dcmread(path))
        except InvalidDicomError:
            log.debug("skipping non-DICOM file %s", path)
    if not datasets:
        raise DicomImportError(f"no DICOM files in {directory}")
    for ds in datasets:
        for keyword, tag in REQUIRED_TAGS.items():
            if keyword not in ds or ds.data_element(keyword).value in (None, ""):
                raise DicomImportError(f"missing geometry tag {keyword} {tag} in {ds.filename}")
    uids = {str(ds.SeriesInstanceUID) for ds in datasets}
    if len(uids) > 1:
        raise DicomImportError(f"mixed series in {directory}: {sorted(uids)}")
    return datasets


def _pixels(ds: pydicom.Dataset) -> np.ndarray:
    pixels = ds.pixel_array.astype(np.float32)
    slope = float(getattr(ds, "RescaleSlope", 1.0))
    intercept = float(getattr(ds, "RescaleIntercept", 0.0))
    return pixels * slope + intercept


def _axes(ds: pydicom.Dataset) -> tuple[np.ndarray, np.ndarray]:
    iop = [float(v) for v in ds.ImageOrientationPatient]
    # IOP holds the row cosine (along a row, i.e. increasing column) then the column cosine
    return np.array(iop[3:6]), np.array(iop[0:3])


def slice_geometry(ds: pydicom.Dataset, timestamp: float | None = None) -> Geometry:
    row_axis, col_axis = _axes(ds)
    normal = np.cross(row_axis, col_axis)
    spacing = [float(v) for v in ds.PixelSpacing]
    origin = [float(v) for v in ds.ImagePositionPatient]
    return Geometry(origin, spacing, np.column_stack([row_axis, col_axis, normal]), timestamp)


def _cluster_planes(positions: np.ndarray, tol: float) -> np.ndarray:
    """Label each position with a plane id; positions within ``tol`` share a plane."""
    labels = np.full(positions.size, -1)
    centres: list[float] = []
    for i, p in enumerate(positions):
        for k, c in enumerate(centres):
            if abs(p - c) <= tol:
                labels[i] = k
                break
        else:
            centres.append(p)
            labels[i] = len(centres) - 1
    return labels


def import_dicom_series(directory) -> Volume3D | InterleavedSequence | ReferenceSequence:
    """Read one series and classify it by its plane positions.

    One plane gives a navigator-only reference sequence, two alternating planes
    an interleaved sequence, and one frame per distinct plane (at least three)
    a static volume.
    """
    datasets = _read_series(Path(directory))
    datasets.sort(key=lambda ds: (parse_dicom_time(ds.AcquisitionTime), int(getattr(ds, "InstanceNumber", 0) or 0)))

    row_axis, col_axis = _axes(datasets[0])
    normal = np.cross(row_axis, col_axis)
    if normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    for ds in datasets[1:]:
        r, c = _axes(ds)
        if not (np.allclose(r, row_axis, atol=1e-4) and np.allclose(c, col_axis, atol=1e-4)):
            raise DicomImportError(f"mixed orientations in {directory}")

    positions = np.array([np.array([float(v) for v in ds.ImagePositionPatient]) @ normal for ds in datasets])
    labels = _cluster_planes(positions, PLANE_TOLERANCE_MM)
    n_planes = labels.max() + 1
    n = len(datasets)

    if n_planes == n and n >= 3:
        return _as_volume(datasets, positions, normal)

    t0 = parse_dicom_time(datasets[0].AcquisitionTime)
    nav_position = positions[0]
    frames = []
    for ds, pos in zip(datasets, positions):
        geometry = slice_geometry(ds, parse_dicom_time(ds.AcquisitionTime) - t0)
        frames.append(Slice2D(_pixels(ds), geometry, float(pos - nav_position)))

    if n_planes == 1:
        return ReferenceSequence(frames, float(nav_position))
    if n_planes == 2 and all(labels[i] == i % 2 for i in range(n)):
        data_position = float(positions[1])
        return InterleavedSequence(frames, float(nav_position), data_position)
    raise DicomImportError(
        f"series in {directory} is neither a volume, a reference nor an interleaved sequence "
        f"({n} frames on {n_planes} planes)"
    )


def _as_volume(datasets, positions, normal) -> Volume3D:
    order = np.argsort(positions)
    datasets = [datasets[i] for i in order]
    positions = positions[order]
    if len(positions) > 1:
        step = float(np.mean(np.diff(positions)))
    else:
        step = float(datasets[0].SliceThickness)
    voxels = np.stack([_pixels(ds) for ds in datasets])
    row_axis, col_axis = _axes(datasets[0])
    spacing = [step] + [float(v) for v in datasets[0].PixelSpacing]
    origin = [float(v) for v in datasets[0].ImagePositionPatient]
    return Volume3D(voxels, Geometry(origin, spacing, np.column_stack([normal, row_axis, col_axis])))

"""Synthetic respiratory-motion liver phantom with analytic ground truth.

Positions inside the phantom are given in the *phantom frame*: millimetres
along the canonical array axes ``(lr, si, ap)`` measured from the volume
centre, with ``lr`` toward the subject's left, ``si`` toward inferior and
``ap`` toward posterior.  The phantom's volume centre sits at
``scanner_center`` so a plane's ``lr`` coordinate is also its sagittal
position in scanner space when the centre is the isocentre.

A positive breathing signal moves tissue inferiorly (inhale); exhale states
are the signal minima.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import dataio
from .landmarks import LandmarkTrack
from .dataio import (
    SLICE_PERIOD_MS,
    Geometry,
    InterleavedSequence,
    ReferenceSequence,
    Slice2D,
    Volume3D,
)


class PhantomSpecError(ValueError):
    pass


@dataclass
class BreathingSignal:
    """Superior-inferior displacement trace (mm) sampled every ``dt`` ms.

    ``components`` holds ``(amplitude_mm, period_ms, phase_rad)`` sinusoids;
    the signal is their sum plus ``drift_rate`` mm/s times elapsed seconds.
    """

    samples: np.ndarray
    dt: float
    components: list[tuple[float, float, float]]
    drift_rate: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.components = [tuple(float(x) for x in c) for c in self.components]
        if self.samples.size < 2:
            raise ValueError("a breathing signal needs at least 2 samples")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        expected = self.value(np.arange(self.samples.size) * self.dt)
        if np.max(np.abs(expected - self.samples)) > 1e-9:
            raise ValueError("samples disagree with the component model")

    @classmethod
    def from_components(cls, components, drift_rate=0.0, dt=SLICE_PERIOD_MS, n=513) -> "BreathingSignal":
        comps = [tuple(float(x) for x in c) for c in components]
        t = np.arange(n) * dt
        samples = _evaluate(comps, drift_rate, t)
        return cls(samples, dt, comps, drift_rate)

    def value(self, t_ms):
        return _evaluate(self.components, self.drift_rate, np.asarray(t_ms, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "samples": self.samples.tolist(),
            "dt": self.dt,
            "components": [list(c) for c in self.components],
            "drift_rate": self.drift_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BreathingSignal":
        return cls(np.asarray(d["samples"]), d["dt"], [tuple(c) for c in d["components"]], d["drift_rate"])


def _evaluate(components, drift_rate, t):
    out = np.zeros_like(t, dtype=np.float64) + drift_rate * t / 1000.0
    for amplitude, period, phase in components:
        out = out + amplitude * np.sin(2.0 * np.pi * t / period + phase)
    return out


def default_signal(n: int = 513, dt: float = SLICE_PERIOD_MS) -> BreathingSignal:
    """Dominant 4 s cycle plus an 11 s modulation and slow drift, 12 mm peak to peak."""
    return BreathingSignal.from_components(
        [(5.0, 4000.0, -0.5 * np.pi), (1.0, 11000.0, 0.7)], drift_rate=0.002, dt=dt, n=n
    )


def _default_vessels():
    return [
        {"center": [0.0, -30.0, -25.0], "radius": 3.5, "contrast": 0.6},
        {"center": [0.0, -20.0, 20.0], "radius": 3.0, "contrast": 0.6},
        {"center": [0.0, 5.0, -5.0], "radius": 4.0, "contrast": 0.6},
        {"center": [0.0, 15.0, 35.0], "radius": 3.0, "contrast": 0.6},
        {"center": [0.0, 30.0, -35.0], "radius": 3.5, "contrast": 0.6},
        {"center": [0.0, 40.0, 10.0], "radius": 3.0, "contrast": 0.6},
    ]


@dataclass
class PhantomSpec:
    """Phantom description; vessels are tubes running along the lr axis.

    ``deformation_scale`` is ordered ``(si, ap, lr)``: displacement per mm of
    breathing signal along each anatomical axis.  ``lr_gradient`` scales the
    motion linearly across the liver, ``1 + lr_gradient * (lr - c_lr) / a_lr``.
    ``noise_sigma`` is a fraction of ``liver_intensity``.
    """

    volume_shape: tuple[int, int, int] = (209, 128, 128)
    spacing: tuple[float, float, float] = (1.8, 1.8, 1.8)
    liver_ellipsoid: dict = field(default_factory=lambda: {
        "center": [0.0, 0.0, 0.0], "semi_axes": [85.0, 65.0, 75.0]})
    vessels: list = field(default_factory=_default_vessels)
    deformation_scale: tuple[float, float, float] = (1.0, 0.25, 0.0)
    seed: int = 0
    lr_gradient: float = 0.2
    noise_sigma: float = 0.02
    texture_amplitude: float = 0.06
    background: float = 0.15
    liver_intensity: float = 1.0
    edge_mm: float = 1.5
    scanner_center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.volume_shape = tuple(int(n) for n in self.volume_shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.deformation_scale = tuple(float(s) for s in self.deformation_scale)
        self.scanner_center = tuple(float(s) for s in self.scanner_center)
        self.validate()

    def validate(self):
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 2:
            raise PhantomSpecError(f"volume_shape must be 3 positive dims >= 2, got {self.volume_shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PhantomSpecError(f"spacing must be 3 positive values, got {self.spacing}")
        if len(self.deformation_scale) != 3:
            raise PhantomSpecError("deformation_scale must have 3 entries")
        axes = self.liver_ellipsoid["semi_axes"]
        if len(axes) != 3 or min(axes) <= 0:
            raise PhantomSpecError("liver semi-axes must be positive")
        half = self.half_extent
        for k, v in enumerate(self.vessels):
            if v["radius"] <= 0:
                raise PhantomSpecError(f"vessel {k} radius must be positive")
            if np.any(np.abs(np.asarray(v["center"], dtype=float)) > half):
                raise PhantomSpecError(f"vessel {k} centre {v['center']} outside the volume")

    @property
    def half_extent(self) -> np.ndarray:
        return (np.asarray(self.volume_shape) - 1) / 2 * np.asarray(self.spacing)

    @property
    def intensity_range(self) -> float:
        return self.liver_intensity

    def geometry(self) -> Geometry:
        return dataio.canonical_volume_geometry(self.scanner_center, self.volume_shape, self.spacing)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("volume_shape", "spacing", "deformation_scale", "scanner_center"):
            d[key] = list(d[key])
        return d

    def to_json(self, path) -> None:
        dataio.write_json(Path(path), self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def lr_position(self, lr_index: float) -> float:
        return lr_index * self.spacing[0] - self.half_extent[0]


# ------------------------------------------------------------- deformation


def _axis_scales(spec: PhantomSpec) -> np.ndarray:
    """Per-mm-signal displacement in phantom-frame order (lr, si, ap)."""
    si, ap, lr = spec.deformation_scale
    return np.array([lr, si, ap])


def _weight(spec: PhantomSpec, lr_rest):
    c = spec.liver_ellipsoid["center"][0]
    a = spec.liver_ellipsoid["semi_axes"][0]
    return 1.0 + spec.lr_gradient * (np.asarray(lr_rest) - c) / a


def deformation_affine(spec: PhantomSpec, signal_value: float) -> np.ndarray:
    """3x4 affine taking rest phantom coordinates to deformed ones."""
    c = spec.liver_ellipsoid["center"][0]
    a = spec.liver_ellipsoid["semi_axes"][0]
    k = signal_value * _axis_scales(spec)
    m = np.zeros((3, 4))
    m[:, :3] = np.eye(3)
    m[:, 0] += k * spec.lr_gradient / a
    m[:, 3] = k * (1.0 - spec.lr_gradient * c / a)
    return m


def displace(spec: PhantomSpec, rest_points, signal_value: float) -> np.ndarray:
    """Forward deformation of rest points ``(..., 3)`` in the phantom frame."""
    rest_points = np.asarray(rest_points, dtype=np.float64)
    w = _weight(spec, rest_points[..., 0])
    return rest_points + signal_value * w[..., None] * _axis_scales(spec)


def undisplace(spec: PhantomSpec, points, signal_value: float) -> np.ndarray:
    """Exact inverse of :func:`displace`."""
    points = np.asarray(points, dtype=np.float64)
    k = signal_value * _axis_scales(spec)
    c = spec.liver_ellipsoid["center"][0]
    a = spec.liver_ellipsoid["semi_axes"][0]
    g = spec.lr_gradient
    lr_rest = (points[..., 0] - k[0] * (1.0 - g * c / a)) / (1.0 + k[0] * g / a)
    w = _weight(spec, lr_rest)
    rest = points - w[..., None] * k
    rest[..., 0] = lr_rest
    return rest


# ------------------------------------------------------------- intensity model


def _texture(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    field_ = ndimage.gaussian_filter(rng.standard_normal(spec.volume_shape), sigma=1.5)
    field_ /= field_.std()
    return field_


def _grid_points(spec: PhantomSpec):
    axes = [np.arange(n) * s - h for n, s, h in zip(spec.volume_shape, spec.spacing, spec.half_extent)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def liver_mask(spec: PhantomSpec, lr, si, ap):
    c = spec.liver_ellipsoid["center"]
    a = spec.liver_ellipsoid["semi_axes"]
    r = np.sqrt(((lr - c[0]) / a[0]) ** 2 + ((si - c[1]) / a[1]) ** 2 + ((ap - c[2]) / a[2]) ** 2)
    scale = float(np.mean(a)) / spec.edge_mm
    return 0.5 * (1.0 - np.tanh(0.5 * (r - 1.0) * scale))


def vessel_profile(spec: PhantomSpec, si, ap):
    """Summed contrast-weighted Gaussian cross-sections of all vessels."""
    total = 0.0
    for v in spec.vessels:
        _, c_si, c_ap = v["center"]
        r = v["radius"]
        total = total + v["contrast"] * np.exp(-((si - c_si) ** 2 + (ap - c_ap) ** 2) / (2 * r * r))
    return total


def intensity_model(spec: PhantomSpec, lr, si, ap, texture=0.0):
    """Analytic rest-pose intensity at phantom-frame points."""
    mask = liver_mask(spec, lr, si, ap)
    tissue = spec.liver_intensity * (1.0 + spec.texture_amplitude * texture)
    tissue = tissue * np.clip(1.0 - vessel_profile(spec, si, ap), 0.0, None)
    return spec.background * (1.0 - mask) + tissue * mask


def generate_static_volume(spec: PhantomSpec) -> Volume3D:
    """Rest-pose (signal 0) phantom on its voxel grid."""
    spec.validate()
    lr, si, ap = _grid_points(spec)
    voxels = intensity_model(spec, lr, si, ap, _texture(spec)).astype(np.float32)
    return Volume3D(voxels, spec.geometry())


def _static_voxels(spec: PhantomSpec, static: Volume3D | None) -> np.ndarray:
    return (static if static is not None else generate_static_volume(spec)).voxels


def slice_geometry(spec: PhantomSpec, plane_lr: float, timestamp: float | None = None) -> Geometry:
    g = spec.geometry()
    index = (plane_lr + spec.half_extent[0]) / spec.spacing[0]
    return dataio.volume_slice_geometry(g, index).with_timestamp(timestamp)


def _check_plane(spec: PhantomSpec, plane_lr: float):
    if abs(plane_lr) > spec.half_extent[0] + 1e-9:
        raise dataio.OutOfBoundsError(
            f"plane at lr={plane_lr:+.2f} mm outside the phantom (|lr| <= {spec.half_extent[0]:.2f} mm)"
        )


def render_slice(spec: PhantomSpec, signal_value: float, plane_offset: float, timestamp: float = 0.0,
                 navigator_offset: float = 0.0, noise_sigma: float = 0.0, rng=None,
                 static: Volume3D | None = None) -> Slice2D:
    """Sagittal slice at ``lr = plane_offset`` of the phantom deformed by ``signal_value`` mm.

    Each output pixel is mapped back to its rest position and the static
    raster is sampled trilinearly there.  ``noise_sigma`` is absolute.
    """
    _check_plane(spec, plane_offset)
    voxels = _static_voxels(spec, static)
    n_si, n_ap = spec.volume_shape[1:]
    si = np.arange(n_si) * spec.spacing[1] - spec.half_extent[1]
    ap = np.arange(n_ap) * spec.spacing[2] - spec.half_extent[2]
    pts = np.empty((n_si, n_ap, 3))
    pts[..., 0] = plane_offset
    pts[..., 1] = si[:, None]
    pts[..., 2] = ap[None, :]
    rest = undisplace(spec, pts, signal_value)
    index = (rest + spec.half_extent) / np.asarray(spec.spacing)
    coords = np.moveaxis(index, -1, 0).reshape(3, -1)
    coords = np.where(np.abs(coords - np.round(coords)) < 1e-9, np.round(coords), coords)
    pixels = ndimage.map_coordinates(voxels, coords, order=1, mode="nearest", prefilter=False)
    pixels = pixels.reshape(n_si, n_ap)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        pixels = pixels + noise_sigma * rng.standard_normal(pixels.shape)
    return Slice2D(pixels.astype(np.float32), slice_geometry(spec, plane_offset, timestamp),
                   float(plane_offset - navigator_offset))


# ------------------------------------------------------------- ground truth


@dataclass
class GroundTruth:
    signal: BreathingSignal
    landmark_tracks: list[LandmarkTrack]
    deformation: np.ndarray          # (frames, 3, 4) rest -> deformed affines
    frame_signal: np.ndarray         # signal value per frame
    timestamps: np.ndarray           # per frame, ms

    def to_dict(self) -> dict:
        return {
            "signal": self.signal.to_dict(),
            "landmark_tracks": [t.to_dict() for t in self.landmark_tracks],
            "deformation": self.deformation.tolist(),
            "frame_signal": self.frame_signal.tolist(),
            "timestamps": self.timestamps.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(BreathingSignal.from_dict(d["signal"]),
                   [LandmarkTrack.from_dict(t) for t in d["landmark_tracks"]],
                   np.asarray(d["deformation"]), np.asarray(d["frame_signal"]), np.asarray(d["timestamps"]))


def visible_vessels(spec: PhantomSpec, plane_lr: float, margin_mm: float = 10.0) -> list[int]:
    """Vessels whose cross-section at ``plane_lr`` lies well inside the liver."""
    c = spec.liver_ellipsoid["center"]
    a = np.asarray(spec.liver_ellipsoid["semi_axes"])
    out = []
    for k, v in enumerate(spec.vessels):
        _, si, ap = v["center"]
        p = np.array([plane_lr, si, ap])
        r = np.sqrt(np.sum(((p - c) / np.maximum(a - margin_mm, 1e-6)) ** 2))
        if r < 1.0:
            out.append(k)
    return out


def landmark_position(spec: PhantomSpec, vessel: int, plane_lr: float, signal_value: float) -> np.ndarray:
    """Analytic (row, column) of a vessel's cross-section in the deformed slice at ``plane_lr``."""
    _, si, ap = spec.vessels[vessel]["center"]
    lr_rest = undisplace(spec, np.array([plane_lr, 0.0, 0.0]), signal_value)[0]
    rest = np.array([lr_rest, si, ap])
    moved = displace(spec, rest, signal_value)
    return (moved[1:] + spec.half_extent[1:]) / np.asarray(spec.spacing[1:])


def landmark_tracks(spec: PhantomSpec, plane_lr: float, signal_values: Sequence[float],
                    relative_offset: float, subject_id: str = "S1") -> list[LandmarkTrack]:
    tracks = []
    for k in visible_vessels(spec, plane_lr):
        rows = [(t, *landmark_position(spec, k, plane_lr, s)) for t, s in enumerate(signal_values)]
        tracks.append(LandmarkTrack(f"vessel{k}", np.array(rows), float(relative_offset), subject_id))
    return tracks


# ------------------------------------------------------------- sequences


def _frame_rng(spec: PhantomSpec, stream: int, position: float, index: int):
    return np.random.default_rng([spec.seed, stream, int(round(position * 10)) + 10**6, index])


def generate_interleaved_sequence(spec: PhantomSpec, signal: BreathingSignal, navigator_offset: float,
                                  data_offset: float, n_pairs: int, start_ms: float = 0.0,
                                  static: Volume3D | None = None, subject_id: str = "S1",
                                  noise: bool = True) -> tuple[InterleavedSequence, GroundTruth]:
    """Alternating navigator/data frames, frame ``i`` stamped ``i * 166`` ms.

    Every frame is rendered at the breathing state of its own acquisition time
    ``start_ms + i * 166``.  Landmark tracks cover the data frames, one time
    index per pair.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    _check_plane(spec, navigator_offset)
    _check_plane(spec, data_offset)
    static = static if static is not None else generate_static_volume(spec)
    sigma = spec.noise_sigma * spec.intensity_range if noise else 0.0
    n_frames = 2 * n_pairs
    timestamps = np.arange(n_frames) * SLICE_PERIOD_MS
    values = signal.value(start_ms + timestamps)
    frames = []
    for i in range(n_frames):
        plane = navigator_offset if i % 2 == 0 else data_offset
        frames.append(render_slice(spec, values[i], plane, timestamps[i], navigator_offset, sigma,
                                   _frame_rng(spec, 1, data_offset, i), static))
    seq = InterleavedSequence(frames, float(navigator_offset), float(data_offset))
    truth = GroundTruth(
        signal,
        landmark_tracks(spec, data_offset, values[1::2], data_offset - navigator_offset, subject_id),
        np.stack([deformation_affine(spec, v) for v in values]),
        values,
        timestamps,
    )
    return seq, truth


def generate_reference_sequence(spec: PhantomSpec, signal: BreathingSignal, navigator_offset: float,
                                n_frames: int, start_ms: float = 0.0, static: Volume3D | None = None,
                                subject_id: str = "S1", noise: bool = True
                                ) -> tuple[ReferenceSequence, GroundTruth]:
    if n_frames < 1:
        raise ValueError("reference length must be >= 1")
    _check_plane(spec, navigator_offset)
    static = static if static is not None else generate_static_volume(spec)
    sigma = spec.noise_sigma * spec.intensity_range if noise else 0.0
    timestamps = np.arange(n_frames) * SLICE_PERIOD_MS
    values = signal.value(start_ms + timestamps)
    frames = [render_slice(spec, v, navigator_offset, t, navigator_offset, sigma,
                           _frame_rng(spec, 2, navigator_offset, i), static)
              for i, (v, t) in enumerate(zip(values, timestamps))]
    truth = GroundTruth(signal, landmark_tracks(spec, navigator_offset, values, 0.0, subject_id),
                        np.stack([deformation_affine(spec, v) for v in values]), values, timestamps)
    return ReferenceSequence(frames, float(navigator_offset)), truth


@dataclass
class PhantomSubject:
    subject_id: str
    spec: PhantomSpec
    volume: Volume3D
    reference: ReferenceSequence
    reference_truth: GroundTruth
    sequences: list[InterleavedSequence]
    truths: list[GroundTruth]
    navigator_offset: float


def generate_subject(spec: PhantomSpec, signal: BreathingSignal, navigator_offset: float,
                     data_offsets: Sequence[float], ref_length: int = 513, n_pairs: int = 180,
                     root=None, subject_id: str = "S1", sequence_gap_ms: float | None = None
                     ) -> PhantomSubject:
    """Static volume, reference sequence and one interleaved sequence per data offset.

    Sequences are acquired back to back on one timeline (``sequence_gap_ms``
    defaults to the sequence duration); the reference sequence comes last.
    When ``root`` is given the subject is written in the dataset layout.
    """
    data_offsets = [float(o) for o in data_offsets]
    if not data_offsets:
        raise ValueError("data_offsets must not be empty")
    if ref_length < 1:
        raise ValueError("ref_length must be >= 1")
    static = generate_static_volume(spec)
    gap = sequence_gap_ms if sequence_gap_ms is not None else 2 * n_pairs * SLICE_PERIOD_MS
    sequences, truths = [], []
    for k, offset in enumerate(data_offsets):
        seq, truth = generate_interleaved_sequence(spec, signal, navigator_offset, offset, n_pairs,
                                                   start_ms=k * gap, static=static, subject_id=subject_id)
        sequences.append(seq)
        truths.append(truth)
    reference, ref_truth = generate_reference_sequence(spec, signal, navigator_offset, ref_length,
                                                       start_ms=len(data_offsets) * gap, static=static,
                                                       subject_id=subject_id)
    subject = PhantomSubject(subject_id, spec, static, reference, ref_truth, sequences, truths,
                             float(navigator_offset))
    if root is not None:
        write_phantom_subject(root, subject)
    return subject


def write_phantom_subject(root, subject: PhantomSubject) -> Path:
    base = dataio.write_subject(root, subject.subject_id, subject.volume, subject.reference, subject.sequences)
    gt = base / "groundtruth"
    subject.spec.to_json(gt / "phantom_spec.json")
    dataio.write_json(gt / "reference.json", subject.reference_truth.to_dict())
    for seq, truth in zip(subject.sequences, subject.truths):
        dataio.write_json(gt / "interleaved" / f"{dataio.offset_dirname(seq.relative_offset)}.json",
                          truth.to_dict())
    return base


def read_ground_truth(root, subject_id: str, relative_offset: float | None = None) -> GroundTruth:
    """Ground truth of one interleaved sequence, or of the reference sequence when offset is None."""
    gt = dataio.subject_dir(root, subject_id) / "groundtruth"
    if relative_offset is None:
        path = gt / "reference.json"
    else:
        path = gt / "interleaved" / f"{dataio.offset_dirname(relative_offset)}.json"
    return GroundTruth.from_dict(json.loads(path.read_text()))


def ladder_offsets(n: int, step: float = 4.0, start: float | None = None) -> list[float]:
    """``n`` plane offsets ``step`` mm apart; by default roughly centred on zero and containing it."""
    if start is None:
        start = -step * math.floor(n / 2)
    return [start + step * k for k in range(n)]

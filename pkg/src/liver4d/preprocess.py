"""Per-subject whitening, spatial augmentation and 3-channel sample assembly."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import dataio
from .dataio import InterleavedSequence, Slice2D, Volume3D


class PreprocessError(ValueError):
    pass


# ------------------------------------------------------------- whitening


@dataclass(frozen=True)
class NormalizationStats:
    mu: float
    sigma_adj: float
    n_voxels: int

    def __post_init__(self):
        if not self.sigma_adj > 0:
            raise PreprocessError("sigma_adj must be positive")

    def to_json(self, path) -> None:
        dataio.write_json(Path(path), asdict(self))

    @classmethod
    def from_json(cls, path) -> "NormalizationStats":
        d = json.loads(Path(path).read_text())
        return cls(float(d["mu"]), float(d["sigma_adj"]), int(d["n_voxels"]))


def _as_array(image) -> np.ndarray:
    if isinstance(image, Slice2D):
        return image.pixels
    if isinstance(image, Volume3D):
        return image.voxels
    return np.asarray(image)


def compute_stats(images: Iterable) -> NormalizationStats:
    """Mean and lower-bounded standard deviation over every voxel of ``images``.

    The deviation is clamped from below at ``1 / sqrt(n_voxels)``.
    """
    arrays = [_as_array(im) for im in images]
    n = sum(a.size for a in arrays)
    if n == 0:
        raise PreprocessError("compute_stats needs at least one non-empty image")
    total = math.fsum(float(np.sum(a, dtype=np.float64)) for a in arrays)
    mu = total / n
    sq = math.fsum(float(np.sum((a.astype(np.float64) - mu) ** 2)) for a in arrays)
    sigma = math.sqrt(sq / n)
    return NormalizationStats(mu, max(sigma, 1.0 / math.sqrt(n)), n)


def subject_images(volume: Volume3D, sequences: Sequence[InterleavedSequence]):
    yield volume
    for seq in sequences:
        yield from seq.frames


def normalize(image, stats: NormalizationStats) -> np.ndarray:
    image = np.asarray(_as_array(image), dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise PreprocessError("image contains non-finite values")
    return ((image - stats.mu) / stats.sigma_adj).astype(np.float32)


def denormalize(image, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) * stats.sigma_adj + stats.mu).astype(np.float32)


# ------------------------------------------------------------- augmentation


@dataclass
class AugmentationConfig:
    max_translation: float = 10.0      # voxels, per axis
    max_rotation: float = 3.0          # degrees
    scale_range: tuple[float, float] = (0.8, 1.2)
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if self.max_translation < 0 or self.max_rotation < 0:
            raise PreprocessError("augmentation bounds must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise PreprocessError(f"invalid scale range {self.scale_range}")


@dataclass(frozen=True)
class SpatialTransform:
    """In-plane similarity about the image centre: ``p' = c + s R (p - c) + t`` on (row, col)."""

    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0

    def _rotation(self) -> np.ndarray:
        a = np.deg2rad(self.rotation)
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])

    def map_points(self, points, shape) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        c = (np.asarray(shape[:2], dtype=np.float64) - 1) / 2
        return c + self.scale * (points - c) @ self._rotation().T + np.asarray(self.translation)

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Warp a 2D image (or ``H x W x C`` stack, channel-wise); zero outside support."""
        image = np.asarray(image)
        if image.ndim == 3:
            return np.stack([self.apply(image[..., k]) for k in range(image.shape[-1])], axis=-1)
        c = (np.asarray(image.shape, dtype=np.float64) - 1) / 2
        inverse = self._rotation().T / self.scale
        offset = c - inverse @ (c + np.asarray(self.translation))
        return ndimage.affine_transform(image, inverse, offset, order=1, mode="constant", cval=0.0,
                                        prefilter=False).astype(image.dtype)


def draw_transform(config: AugmentationConfig, rng: np.random.Generator) -> SpatialTransform:
    t = rng.uniform(-config.max_translation, config.max_translation, size=2)
    rot = rng.uniform(-config.max_rotation, config.max_rotation)
    scale = rng.uniform(*config.scale_range)
    return SpatialTransform((float(t[0]), float(t[1])), float(rot), float(scale))


# ------------------------------------------------------------- samples


@dataclass
class TrainingSample:
    input: np.ndarray          # (H, W, 3): navigator, static slice at navigator, static slice at target
    label: np.ndarray          # (H, W)
    target_offset: float
    subject_id: str = "S1"
    timestamp: float | None = None


def augment(sample: TrainingSample, config: AugmentationConfig, rng: np.random.Generator,
            transform: SpatialTransform | None = None) -> TrainingSample:
    """Apply one random similarity transform to all input channels and the label."""
    if not config.enabled:
        return sample
    transform = transform if transform is not None else draw_transform(config, rng)
    return TrainingSample(transform.apply(sample.input), transform.apply(sample.label),
                          sample.target_offset, sample.subject_id, sample.timestamp)


def build_sample(pair: tuple[Slice2D, Slice2D], static_volume: Volume3D, navigator_offset: float,
                 stats: NormalizationStats, subject_id: str = "S1") -> TrainingSample:
    """Assemble the 3-channel input for one ``(navigator, label)`` pair.

    ``navigator_offset`` is the navigator plane's sagittal position (mm); the
    label's ``plane_offset`` is taken relative to it.
    """
    navigator, label = pair
    target = label.plane_offset
    if target is None:
        target = label.plane_position - navigator_offset
    ref = dataio.extract_volume_slice(static_volume, 0.0, navigator_offset)
    tgt = dataio.extract_volume_slice(static_volume, target, navigator_offset)
    channels = np.stack([
        normalize(navigator, stats),
        normalize(ref, stats),
        normalize(tgt, stats),
    ], axis=-1)
    return TrainingSample(channels, normalize(label, stats), float(target), subject_id, label.timestamp)


@dataclass
class SampleSet:
    """All samples of one subject, stored compactly.

    The static volume is held once (normalized); inputs are assembled on demand.
    """

    navigators: np.ndarray         # (N, H, W) normalized
    labels: np.ndarray             # (N, H, W) normalized
    target_index: np.ndarray       # (N,) static-volume slice of channel 2
    offsets: np.ndarray            # (N,) plane offset of the label, mm
    timestamps: np.ndarray         # (N,) label timestamps, ms
    pair_index: np.ndarray         # (N,) index of the pair inside its sequence
    volume: np.ndarray             # (S, H, W) normalized static volume
    navigator_index: int
    subject_id: str = "S1"

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def inputs(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx))
        nav = self.navigators[idx]
        ref = np.broadcast_to(self.volume[self.navigator_index], nav.shape)
        tgt = self.volume[self.target_index[idx]]
        return np.stack([nav, ref, tgt], axis=-1)

    def sample(self, i: int) -> TrainingSample:
        return TrainingSample(self.inputs(i)[0], np.array(self.labels[i]), float(self.offsets[i]),
                              self.subject_id, float(self.timestamps[i]))

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.navigators[idx], self.labels[idx], self.target_index[idx], self.offsets[idx],
                         self.timestamps[idx], self.pair_index[idx], self.volume, self.navigator_index,
                         self.subject_id)


def build_sample_set(static_volume: Volume3D, sequences: Sequence[InterleavedSequence],
                     stats: NormalizationStats, subject_id: str = "S1") -> SampleSet:
    if not sequences:
        raise PreprocessError("no interleaved sequences")
    nav_pos = sequences[0].navigator_offset
    nav_index = dataio.slice_index_for_offset(static_volume, 0.0, nav_pos)
    navs, labels, tidx, offs, ts, pidx = [], [], [], [], [], []
    for seq in sequences:
        if abs(seq.navigator_offset - nav_pos) > 0.5:
            raise PreprocessError("sequences disagree on the navigator position")
        index = dataio.slice_index_for_offset(static_volume, seq.relative_offset, nav_pos)
        for k, (nav, lab) in enumerate(dataio.pair_frames(seq)):
            navs.append(normalize(nav, stats))
            labels.append(normalize(lab, stats))
            tidx.append(index)
            offs.append(seq.relative_offset)
            ts.append(lab.timestamp if lab.timestamp is not None else np.nan)
            pidx.append(k)
    return SampleSet(np.stack(navs), np.stack(labels), np.asarray(tidx), np.asarray(offs, dtype=np.float64),
                     np.asarray(ts, dtype=np.float64), np.asarray(pidx), normalize(static_volume, stats),
                     nav_index, subject_id)


# ------------------------------------------------------------- splitting


def split_indices(offsets: Sequence[float], n_validation: int, stratify_by_offset: bool = True,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return sorted ``(train, validation)`` index arrays.

    Stratified splits spread the validation count over plane offsets so that
    per-offset counts differ by at most one.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    n = offsets.size
    if not 0 <= n_validation < n:
        raise PreprocessError(f"n_validation={n_validation} must be smaller than the {n} samples")
    rng = np.random.default_rng(seed)
    if not stratify_by_offset:
        val = rng.choice(n, size=n_validation, replace=False)
    else:
        keys = np.round(offsets, 3)
        groups = [np.flatnonzero(keys == k) for k in np.unique(keys)]
        base, extra = divmod(n_validation, len(groups))
        bonus = set(rng.choice(len(groups), size=extra, replace=False).tolist())
        val = []
        for g, members in enumerate(groups):
            want = base + (g in bonus)
            if want > members.size:
                raise PreprocessError("not enough samples at an offset for a stratified split")
            val.extend(rng.choice(members, size=want, replace=False).tolist())
        val = np.asarray(val, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    mask[val] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def split_dataset(samples, n_validation: int, stratify_by_offset: bool = True, seed: int = 0):
    """Split a :class:`SampleSet` or a list of :class:`TrainingSample`."""
    if isinstance(samples, SampleSet):
        train, val = split_indices(samples.offsets, n_validation, stratify_by_offset, seed)
        return samples.subset(train), samples.subset(val)
    offsets = [s.target_offset for s in samples]
    train, val = split_indices(offsets, n_validation, stratify_by_offset, seed)
    return [samples[i] for i in train], [samples[i] for i in val]

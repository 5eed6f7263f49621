"""TRE on landmark tracks, breathing-cycle selection, loss-vs-distance and data-size ablation."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks
from skimage.registration import phase_cross_correlation

from . import dataio
from .dataio import CANONICAL_SPACING, SLICE_PERIOD_MS
from .landmarks import LandmarkTrack, track_landmarks
from .model import UNet, UNetConfig, forward
from .preprocess import SampleSet
from .training import TrainConfig, evaluate_loss, per_sample_loss, train_subject

log = logging.getLogger(__name__)

VOXEL_MM = CANONICAL_SPACING
CYCLE_WINDOW = (8, 17)
BIN_WIDTH_MM = 12.0


class EvaluationError(ValueError):
    pass


class CycleNotFoundError(EvaluationError):
    pass


# ------------------------------------------------------------- TRE


@dataclass
class TREStat:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, errors) -> "TREStat":
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(np.mean(e)), float(np.std(e)), int(e.size))

    def to_dict(self) -> dict:
        return {"mean_voxel": self.mean, "std_voxel": self.std,
                "mean_mm": self.mean * VOXEL_MM, "std_mm": self.std * VOXEL_MM, "n_points": self.n}


def offset_label(offset_mm: float) -> str:
    """Column label in cm, e.g. ``+3 cm``, ``0 cm``, ``-2 cm``."""
    cm = offset_mm / 10.0
    return "0 cm" if cm == 0 else f"{cm:+g} cm"


@dataclass
class TREReport:
    """Per-point errors grouped by (subject, plane offset), plus aggregates.

    ``overall`` pools every point; ``overall_mean_of_means`` averages the
    per-(subject, offset) means instead.
    """

    errors: dict[tuple[str, float], np.ndarray]

    @property
    def groups(self) -> dict[tuple[str, float], TREStat]:
        return {k: TREStat.of(v) for k, v in sorted(self.errors.items())}

    @property
    def subjects(self) -> list[str]:
        return sorted({k[0] for k in self.errors})

    @property
    def offsets(self) -> list[float]:
        return sorted({k[1] for k in self.errors}, reverse=True)

    def per_subject(self) -> dict[str, TREStat]:
        return {s: TREStat.of(np.concatenate([v for k, v in self.errors.items() if k[0] == s]))
                for s in self.subjects}

    def per_offset(self) -> dict[float, TREStat]:
        return {o: TREStat.of(np.concatenate([v for k, v in self.errors.items() if k[1] == o]))
                for o in self.offsets}

    @property
    def overall(self) -> TREStat:
        if not self.errors:
            return TREStat.of([])
        return TREStat.of(np.concatenate(list(self.errors.values())))

    @property
    def overall_mean_of_means(self) -> float:
        means = [s.mean for s in self.groups.values() if s.n]
        return float(np.mean(means)) if means else float("nan")

    def table(self) -> dict:
        """Rows per subject plus a pooled row; columns per offset plus ``all positions``."""
        all_row = "-".join([self.subjects[0], self.subjects[-1]]) if len(self.subjects) > 1 else "all"
        columns = [offset_label(o) for o in self.offsets] + ["all positions"]
        rows = {}
        groups = self.groups
        for s in self.subjects:
            cells = [groups[(s, o)].to_dict() if (s, o) in groups else None for o in self.offsets]
            rows[s] = cells + [self.per_subject()[s].to_dict()]
        rows[all_row] = [st.to_dict() for st in self.per_offset().values()] + [self.overall.to_dict()]
        return {"columns": columns, "rows": rows}

    def to_dict(self) -> dict:
        return {
            "groups": [{"subject_id": s, "plane_offset_mm": o, **st.to_dict()}
                       for (s, o), st in self.groups.items()],
            "per_subject": {s: st.to_dict() for s, st in self.per_subject().items()},
            "overall": self.overall.to_dict(),
            "overall_mean_of_means_voxel": self.overall_mean_of_means,
            "overall_mean_of_means_mm": self.overall_mean_of_means * VOXEL_MM,
            "table": self.table(),
        }

    def write(self, directory) -> None:
        directory = Path(directory)
        dataio.write_json(directory / "tre_report.json", self.to_dict())
        with open(directory / "tre_table.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            table = self.table()
            writer.writerow(["subject"] + table["columns"])
            for row, cells in table["rows"].items():
                writer.writerow([row] + ["" if c is None else f"{c['mean_voxel']:.2f} ± {c['std_voxel']:.2f}"
                                         for c in cells])


def _key(track: LandmarkTrack):
    return (track.subject_id, round(float(track.plane_offset), 6), track.label)


def compute_tre(ground: Sequence[LandmarkTrack], predicted: Sequence[LandmarkTrack]) -> TREReport:
    """Euclidean per-point error in voxels, tracks paired by (subject, offset, label) and time index."""
    g = {_key(t): t for t in ground}
    p = {_key(t): t for t in predicted}
    problems = [f"no prediction for {k}" for k in g if k not in p]
    problems += [f"no ground truth for {k}" for k in p if k not in g]
    errors: dict[tuple[str, float], list] = {}
    for k in g:
        if k not in p:
            continue
        gt, pr = g[k].positions, p[k].positions
        gt_times = {float(t): i for i, t in enumerate(gt[:, 0])}
        pr_times = {float(t): i for i, t in enumerate(pr[:, 0])}
        missing = sorted(set(gt_times) ^ set(pr_times))
        if missing:
            problems.append(f"{k}: unmatched time indices {missing[:10]}")
            continue
        order = [pr_times[t] for t in gt[:, 0]]
        d = np.linalg.norm(gt[:, 1:] - pr[order, 1:], axis=1)
        errors.setdefault((k[0], k[1]), []).append(d)
    if problems:
        raise EvaluationError("track mismatch: " + "; ".join(problems))
    return TREReport({k: np.concatenate(v) for k, v in errors.items()})


# ------------------------------------------------------------- breathing cycles


def navigator_surrogate(frames, reference=None, upsample: int = 10) -> np.ndarray:
    """Superior-inferior shift (rows, positive = inferior) of each navigator frame against ``reference``.

    Sub-pixel phase correlation on the whole frame; the first frame is the
    reference by default.
    """
    frames = [f.pixels if hasattr(f, "pixels") else np.asarray(f) for f in frames]
    ref = frames[0] if reference is None else np.asarray(reference)
    out = np.empty(len(frames))
    for i, frame in enumerate(frames):
        shift, _, _ = phase_cross_correlation(ref, frame, upsample_factor=upsample, normalization=None)
        out[i] = -shift[0]
    return out


def breathing_cycles(signal) -> list[tuple[int, int]]:
    """Every exhale-to-exhale span ``(start, end)`` between consecutive local minima."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.size < 3:
        raise CycleNotFoundError("need a 1D surrogate of at least 3 samples")
    span = float(np.ptp(signal))
    if span == 0:
        raise CycleNotFoundError("constant surrogate has no breathing cycle")
    minima, _ = find_peaks(-signal, prominence=0.1 * span)
    return [(int(a), int(b)) for a, b in zip(minima[:-1], minima[1:])]


def select_breathing_cycle(signal, window: tuple[int, int] = CYCLE_WINDOW, rng=None,
                           start_at: int = 0) -> tuple[int, int]:
    """One exhale-to-exhale cycle of the surrogate; ``end - start`` is its length in time points.

    Cycles whose length lies in ``window`` are preferred; a random one is
    taken when ``rng`` is given, the first otherwise.  If no cycle fits the
    window the first cycle is returned with a warning.
    """
    cycles = [c for c in breathing_cycles(signal) if c[0] >= start_at]
    if not cycles:
        raise CycleNotFoundError("no complete exhale-to-exhale cycle found")
    fitting = [c for c in cycles if window[0] <= c[1] - c[0] <= window[1]]
    if not fitting:
        warnings.warn(f"no breathing cycle within {window[0]}-{window[1]} time points; "
                      f"using one of length {cycles[0][1] - cycles[0][0]}", stacklevel=2)
        return cycles[0]
    if rng is None:
        return fitting[0]
    return fitting[int(np.random.default_rng(rng).integers(len(fitting)))]


# ------------------------------------------------------------- loss vs distance


@dataclass
class DistanceBin:
    index: int
    low_mm: float
    high_mm: float
    positions: list[float]
    count: int
    mean: float
    q1: float
    median: float
    q3: float
    minimum: float
    maximum: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def distance_bin(distance_mm, width: float = BIN_WIDTH_MM):
    """Bin index ``floor((d + width/2) / width)``: bins are centred on multiples of ``width``."""
    return np.floor((np.asarray(distance_mm, dtype=np.float64) + width / 2) / width).astype(np.int64)


def bin_losses(distances, losses, width: float = BIN_WIDTH_MM) -> list[DistanceBin]:
    """Box-plot statistics of ``losses`` per distance bin, empty bins in range included."""
    distances = np.asarray(distances, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if distances.shape != losses.shape or distances.size == 0:
        raise EvaluationError("distances and losses must be non-empty and equally long")
    bins = distance_bin(distances, width)
    out = []
    for b in range(int(bins.min()), int(bins.max()) + 1):
        member = bins == b
        vals = losses[member]
        nan = float("nan")
        stats = (float(np.mean(vals)), *map(float, np.percentile(vals, [25, 50, 75])),
                 float(vals.min()), float(vals.max())) if vals.size else (nan,) * 6
        out.append(DistanceBin(b, b * width - width / 2, b * width + width / 2,
                               sorted(set(distances[member].tolist())), int(vals.size), *stats))
    return out


def loss_vs_distance(model: UNet, samples: SampleSet, width: float = BIN_WIDTH_MM) -> list[DistanceBin]:
    return bin_losses(samples.offsets, per_sample_loss(model, samples), width)


def write_bins(path, bins: Sequence[DistanceBin]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "low_mm", "high_mm", "count", "mean", "q1", "median", "q3", "min", "max"])
        for b in bins:
            writer.writerow([b.index, b.low_mm, b.high_mm, b.count, repr(b.mean), repr(b.q1), repr(b.median),
                             repr(b.q3), repr(b.minimum), repr(b.maximum)])


# ------------------------------------------------------------- ablation


def acquisition_minutes(n_samples: int) -> float:
    """Scan time of ``n_samples`` navigator/data pairs: two 166 ms frames each."""
    return n_samples * 2 * SLICE_PERIOD_MS / 1000.0 / 60.0


@dataclass
class AblationRow:
    fraction: float
    samples: int
    acquisition_minutes: float
    validation_loss: float
    best_epoch: int


def ablation_study(train: SampleSet, validation: SampleSet, fractions: Sequence[float], config: TrainConfig,
                   model_config: UNetConfig | None = None, out_dir=None,
                   test: SampleSet | None = None) -> list[AblationRow]:
    """Train one model per fraction on nested stratified subsets of ``train``.

    The reported loss is the returned (best-validation) model's MSE on
    ``test``, or on ``validation`` when no test set is given.
    """
    fractions = [float(f) for f in fractions]
    if any(not 0 < f <= 1 for f in fractions):
        raise EvaluationError("fractions must lie in (0, 1]")
    evaluation = test if test is not None else validation
    rows = []
    for f in fractions:
        run_dir = None if out_dir is None else Path(out_dir) / f"fraction_{f:.2f}"
        report, model = train_subject(train, validation, replace(config, data_fraction=f), model_config, run_dir)
        loss = evaluate_loss(model, evaluation)
        rows.append(AblationRow(f, report.n_train, acquisition_minutes(report.n_train), loss, report.best_epoch))
        log.info("fraction %.2f: %d samples, %.1f min, loss %.5f", f, report.n_train,
                 rows[-1].acquisition_minutes, loss)
    if out_dir is not None:
        write_ablation(Path(out_dir) / "ablation.csv", rows)
    return rows


def write_ablation(path, rows: Sequence[AblationRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "samples", "acquisition_minutes", "validation_loss", "best_epoch"])
        for r in rows:
            writer.writerow([r.fraction, r.samples, repr(r.acquisition_minutes), repr(r.validation_loss),
                             r.best_epoch])


# ------------------------------------------------------------- phantom harness


@dataclass
class HeldOutCycle:
    plane_offset: float        # relative to the navigator, mm
    start: int                 # pair index, inclusive
    end: int                   # pair index, exclusive


def phantom_cycles(subject, offsets: Sequence[float], start_at: int = 0, rng=None) -> list[HeldOutCycle]:
    """One held-out cycle per offset, detected on the known navigator signal (one value per pair)."""
    by_offset = {round(seq.relative_offset, 6): truth for seq, truth in zip(subject.sequences, subject.truths)}
    cycles = []
    for o in offsets:
        truth = by_offset.get(round(float(o), 6))
        if truth is None:
            raise EvaluationError(f"no interleaved sequence at offset {o}")
        s, e = select_breathing_cycle(truth.frame_signal[0::2], rng=rng, start_at=start_at)
        cycles.append(HeldOutCycle(float(o), s, e))
    return cycles


def cycle_indices(samples: SampleSet, cycle: HeldOutCycle) -> np.ndarray:
    idx = np.flatnonzero((np.abs(samples.offsets - cycle.plane_offset) < 1e-6)
                         & (samples.pair_index >= cycle.start) & (samples.pair_index < cycle.end))
    return idx[np.argsort(samples.pair_index[idx], kind="stable")]


def holdout_mask(samples: SampleSet, cycles: Sequence[HeldOutCycle]) -> np.ndarray:
    """True for samples outside every held-out cycle."""
    mask = np.ones(len(samples), dtype=bool)
    for c in cycles:
        mask[cycle_indices(samples, c)] = False
    return mask


def cycle_tre(model: UNet, samples: SampleSet, cycles: Sequence[HeldOutCycle], ground: dict, rest: dict,
              intensity_scale: float = 1.0, patch_radius: int = 8, search_radius: int = 8
              ) -> tuple[TREReport, list[LandmarkTrack], list[LandmarkTrack]]:
    """TRE of predicted data slices over held-out cycles.

    ``ground`` maps a plane offset to its ground-truth tracks (any time
    range; they are cut to the cycle) and ``rest`` maps it to the
    ``label -> (row, col)`` rest positions in the static slice that seed the
    template tracker.  Each prediction is the entry of the navigator's volume
    batch at the cycle's target slice; entries are independent, so this
    equals slicing the full predicted volume.
    """
    ground_out, predicted = [], []
    for cycle in cycles:
        key = round(cycle.plane_offset, 6)
        idx = cycle_indices(samples, cycle)
        if idx.size == 0:
            raise EvaluationError(f"no samples in held-out cycle {cycle}")
        pred = forward(model, samples.inputs(idx))[..., 0] * intensity_scale
        reference = samples.volume[samples.target_index[idx[0]]] * intensity_scale
        times = samples.pair_index[idx]
        predicted += track_landmarks(pred, reference, rest[key], cycle.plane_offset, samples.subject_id, times,
                                     patch_radius, search_radius)
        for t in ground[key]:
            keep = np.isin(t.positions[:, 0], times)
            ground_out.append(LandmarkTrack(t.label, t.positions[keep], cycle.plane_offset, samples.subject_id))
    return compute_tre(ground_out, predicted), ground_out, predicted


def phantom_ground_truth(spec, truths: dict) -> tuple[dict, dict]:
    """Analytic tracks and rest positions per offset from phantom ground truth (offset -> GroundTruth)."""
    from .phantom import landmark_position

    ground, rest = {}, {}
    for offset, (data_offset, truth) in truths.items():
        key = round(float(offset), 6)
        ground[key] = truth.landmark_tracks
        rest[key] = {t.label: landmark_position(spec, int(t.label[len("vessel"):]), data_offset, 0.0)
                     for t in truth.landmark_tracks}
    return ground, rest


def phantom_tre(model: UNet, samples: SampleSet, subject, cycles: Sequence[HeldOutCycle],
                intensity_scale: float = 1.0) -> tuple[TREReport, list[LandmarkTrack], list[LandmarkTrack]]:
    """:func:`cycle_tre` against the analytic vessel tracks of an in-memory phantom subject."""
    truths = {seq.relative_offset: (seq.data_offset, truth) for seq, truth in zip(subject.sequences, subject.truths)}
    ground, rest = phantom_ground_truth(subject.spec, truths)
    return cycle_tre(model, samples, cycles, ground, rest, intensity_scale)

"""``liver4d`` command line: phantom, prepare, train, reconstruct, evaluate, ablate.

Every subcommand works inside one workspace directory (``--out``)::

    dataset/                    phantom subjects (input layout)
    prepared/subject/<id>/      canonical grids + stats.json
    models/<id>/                best.weights, final.weights, train_report.json, heldout.json
    reconstruction/<id>/        one volume per navigator frame + index.json
    evaluation/                 tre_report.json, tre_table.csv, loss_vs_distance_<id>.csv
    ablation/<id>/              ablation.csv and one run per fraction

and writes its resolved configuration as ``run_config.yaml`` next to its outputs.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, evaluate, phantom, reconstruct
from .config import ConfigError, RunConfig, load_config, resolve
from .dicom import import_dicom_series
from .landmarks import LandmarkTrack, save_tracks
from .model import load_weights
from .preprocess import NormalizationStats, build_sample_set, compute_stats, split_dataset, subject_images
from .training import train_subject

log = logging.getLogger("liver4d")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------- helpers


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _prepared_root(cfg: RunConfig) -> Path:
    return _stage_dir(cfg, "prepared")


def _subjects(cfg: RunConfig, root: Path) -> list[str]:
    found = dataio.list_subjects(root)
    if not found:
        raise FileNotFoundError(f"no subjects under {root}; run the previous stage first")
    if cfg.subject_ids:
        missing = [s for s in cfg.subject_ids if s not in found]
        if missing:
            raise FileNotFoundError(f"subject(s) {', '.join(missing)} not found under {root}")
        return list(cfg.subject_ids)
    return found


def _load_prepared(cfg: RunConfig, subject_id: str):
    root = _prepared_root(cfg)
    volume = dataio.read_static_volume(root, subject_id)
    sequences = [dataio.read_interleaved(d) for d in dataio.list_interleaved(root, subject_id)]
    stats = NormalizationStats.from_json(dataio.subject_dir(root, subject_id) / "stats.json")
    return volume, sequences, stats


def _cycles(cfg: RunConfig, sequences) -> list[evaluate.HeldOutCycle]:
    """Held-out cycle per evaluation offset, found on the navigator frames of that offset's sequence."""
    by_offset = {round(s.relative_offset, 6): s for s in sequences}
    cycles = []
    for o in cfg.evaluation.tre_offsets_mm:
        seq = by_offset.get(round(float(o), 6))
        if seq is None:
            raise ValueError(f"no interleaved sequence at evaluation offset {o:+.1f} mm")
        navigators = [nav for nav, _ in dataio.pair_frames(seq)]
        s, e = evaluate.select_breathing_cycle(evaluate.navigator_surrogate(navigators),
                                               start_at=cfg.evaluation.cycle_start_pair)
        cycles.append(evaluate.HeldOutCycle(float(o), s, e))
    return cycles


def _datasets(cfg: RunConfig, subject_id: str):
    """``(all samples, train, validation, held-out cycles)`` for a prepared subject."""
    volume, sequences, stats = _load_prepared(cfg, subject_id)
    samples = build_sample_set(volume, sequences, stats, subject_id)
    cycles = _cycles(cfg, sequences)
    rest = samples.subset(np.flatnonzero(evaluate.holdout_mask(samples, cycles)))
    n_val = min(cfg.evaluation.n_validation, len(rest) - 1)
    train, val = split_dataset(rest, n_val, cfg.evaluation.stratify_by_offset, cfg.seed)
    return samples, train, val, cycles


def _write_config(cfg: RunConfig, directory: Path) -> None:
    cfg.write(directory / "run_config.yaml")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------- subcommands


def cmd_phantom(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "dataset")
    base = phantom.PhantomSpec.from_json(cfg.phantom_spec) if cfg.phantom_spec else phantom.PhantomSpec()
    p = cfg.phantom
    offsets = phantom.ladder_offsets(p.n_offsets, p.offset_step_mm)
    for k in range(cfg.n_subjects):
        spec = replace(base, seed=cfg.seed + k)
        subject_id = f"S{k + 1}"
        log.info("phantom subject %s: %d offsets x %d pairs", subject_id, len(offsets), p.n_pairs)
        phantom.generate_subject(spec, phantom.default_signal(p.reference_length), p.navigator_offset_mm,
                                 [p.navigator_offset_mm + o for o in offsets], p.reference_length, p.n_pairs,
                                 root=out, subject_id=subject_id)
    _write_config(cfg, out)
    return out


def _import_subject(source: Path, subject_id: str):
    """One subject in the dataset layout, or a DICOM tree ``<id>/{volume,reference,interleaved/*}``."""
    if (source / "subject" / subject_id).is_dir():
        ref = dataio.read_reference(source, subject_id)
        seqs = [dataio.read_interleaved(d) for d in dataio.list_interleaved(source, subject_id)]
        return dataio.read_static_volume(source, subject_id), ref, seqs
    d = source / subject_id
    volume = import_dicom_series(d / "volume")
    if not isinstance(volume, dataio.Volume3D):
        raise ValueError(f"{d / 'volume'} is not a volume series")
    ref = import_dicom_series(d / "reference") if (d / "reference").is_dir() else None
    seqs = [_as_interleaved(import_dicom_series(p)) for p in sorted((d / "interleaved").iterdir()) if p.is_dir()]
    return volume, ref, seqs


def _as_interleaved(series):
    # a zero-offset pair sequence has a single plane and imports like a reference sequence
    if isinstance(series, dataio.ReferenceSequence):
        return dataio.InterleavedSequence(series.frames, series.navigator_offset, series.navigator_offset)
    if not isinstance(series, dataio.InterleavedSequence):
        raise ValueError("interleaved directory holds a static volume series")
    return series


def _source_subjects(source: Path) -> list[str]:
    if (source / "subject").is_dir():
        return dataio.list_subjects(source)
    return sorted(p.name for p in source.iterdir() if (p / "volume").is_dir())


def cmd_prepare(cfg: RunConfig) -> Path:
    source = Path(cfg.dataset_root) if cfg.dataset_root else _stage_dir(cfg, "dataset")
    if not source.is_dir():
        raise FileNotFoundError(f"dataset root {source} does not exist")
    out = _prepared_root(cfg)
    subjects = cfg.subject_ids or _source_subjects(source)
    if not subjects:
        raise FileNotFoundError(f"no subjects found under {source}")
    for subject_id in subjects:
        volume, ref, seqs = _import_subject(source, subject_id)
        shape = tuple(cfg.grid_shape)
        volume = dataio.canonicalize_volume(volume, shape, cfg.grid_spacing)
        g = volume.geometry

        def canon(frames):
            return [dataio.canonicalize_slice(f, g, shape[1:]) for f in frames]

        ref = None if ref is None else dataio.ReferenceSequence(canon(ref.frames), ref.navigator_offset)
        seqs = [dataio.InterleavedSequence(canon(s.frames), s.navigator_offset, s.data_offset) for s in seqs]
        base = dataio.write_subject(out, subject_id, volume, ref, seqs)
        compute_stats(subject_images(volume, seqs)).to_json(base / "stats.json")
        for extra in ("groundtruth", "annotations"):
            src = source / "subject" / subject_id / extra
            if src.is_dir() and src.resolve() != (base / extra).resolve():
                shutil.copytree(src, base / extra, dirs_exist_ok=True)
    _write_config(cfg, out)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "models")
    for subject_id in _subjects(cfg, _prepared_root(cfg)):
        _, train, val, cycles = _datasets(cfg, subject_id)
        d = out / subject_id
        report, _ = train_subject(train, val, cfg.train, cfg.model, d)
        dataio.write_json(d / "heldout.json", [c.__dict__ for c in cycles])
        log.info("%s: best epoch %d, val %.5f", subject_id, report.best_epoch, min(report.val_loss))
    _write_config(cfg, out)
    return out


def cmd_reconstruct(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "reconstruction")
    for subject_id in _subjects(cfg, _prepared_root(cfg)):
        volume, _, stats = _load_prepared(cfg, subject_id)
        reference = dataio.read_reference(_prepared_root(cfg), subject_id)
        if reference is None:
            raise FileNotFoundError(f"{subject_id}: no reference sequence to reconstruct")
        weights = _stage_dir(cfg, "models") / subject_id / "best.weights"
        model = load_weights(weights)
        d = out / subject_id
        scratch = d / "volumes.tmp.npy"
        recon = reconstruct.reconstruct_4d(model, reference.frames, volume, stats, cfg.evaluation.stride,
                                           out_path=scratch,
                                           provenance={"subject_id": subject_id, "weights_sha256": _sha256(weights),
                                                       "navigator_source": "reference"})
        reconstruct.export_reconstruction(recon, d)
        dataio.write_json(d / "timing.json", {"timing_s": recon.timing_s,
                                               "reference_s_per_volume": reconstruct.REPORTED_SECONDS_PER_VOLUME})
        del recon
        scratch.unlink()
        log.info("%s: reconstructed volumes written to %s", subject_id, d)
    _write_config(cfg, out)
    return out


def _ground_truth(cfg: RunConfig, subject_id: str, sequences) -> tuple[dict, dict]:
    base = dataio.subject_dir(_prepared_root(cfg), subject_id)
    if (base / "groundtruth").is_dir():
        spec = phantom.PhantomSpec.from_json(base / "groundtruth" / "phantom_spec.json")
        truths = {}
        for seq in sequences:
            if any(abs(seq.relative_offset - o) < 1e-6 for o in cfg.evaluation.tre_offsets_mm):
                truth = phantom.read_ground_truth(_prepared_root(cfg), subject_id, seq.relative_offset)
                truths[seq.relative_offset] = (seq.data_offset, truth)
        return evaluate.phantom_ground_truth(spec, truths)
    ground, rest = {}, {}
    for o in cfg.evaluation.tre_offsets_mm:
        path = base / "annotations" / f"{dataio.offset_dirname(o)}.json"
        if not path.exists():
            raise FileNotFoundError(f"{subject_id}: no ground truth or annotation file {path}")
        payload = json.loads(path.read_text())
        key = round(float(o), 6)
        ground[key] = [LandmarkTrack.from_dict(t) for t in payload["tracks"]]
        rest[key] = {k: np.asarray(v, dtype=np.float64) for k, v in payload["rest_positions"].items()}
    return ground, rest


def cmd_evaluate(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "evaluation")
    errors = {}
    for subject_id in _subjects(cfg, _prepared_root(cfg)):
        _, sequences, _ = _load_prepared(cfg, subject_id)
        samples, _, val, _ = _datasets(cfg, subject_id)
        d = _stage_dir(cfg, "models") / subject_id
        cycles = [evaluate.HeldOutCycle(**c) for c in json.loads((d / "heldout.json").read_text())]
        model = load_weights(d / "best.weights")
        ground, rest = _ground_truth(cfg, subject_id, sequences)
        report, _, predicted = evaluate.cycle_tre(model, samples, cycles, ground, rest,
                                                  patch_radius=cfg.evaluation.patch_radius,
                                                  search_radius=cfg.evaluation.search_radius)
        errors.update(report.errors)
        evaluate.write_bins(out / f"loss_vs_distance_{subject_id}.csv", evaluate.loss_vs_distance(model, val))
        save_tracks(out / f"predicted_tracks_{subject_id}.json", predicted)
    report = evaluate.TREReport(errors)
    report.write(out)
    overall = report.overall
    log.info("TRE %.3f ± %.3f voxel (%.2f ± %.2f mm), %d points", overall.mean, overall.std,
             overall.mean * evaluate.VOXEL_MM, overall.std * evaluate.VOXEL_MM, overall.n)
    _write_config(cfg, out)
    return out


def cmd_ablate(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "ablation")
    for subject_id in _subjects(cfg, _prepared_root(cfg)):
        _, train, val, _ = _datasets(cfg, subject_id)
        evaluate.ablation_study(train, val, cfg.evaluation.ablation_fractions, cfg.train, cfg.model,
                                out / subject_id)
    _write_config(cfg, out)
    return out


COMMANDS = {
    "phantom": cmd_phantom,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liver4d", description="Navigator-driven 4D liver MRI reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--out", type=Path, help="workspace directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--quick", action="store_true", help="tiny phantom and short training (CI profile)")
        p.add_argument("--subjects", type=int, help="number of phantom subjects")
        p.add_argument("--stride", type=int, help="reconstruct every n-th navigator frame")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.quick)
        cfg = resolve(cfg, args.out, args.seed, args.subjects, args.stride)
        if cfg.evaluation.stride < 1 or cfg.n_subjects < 1:
            raise ConfigError("--stride and --subjects must be positive")
    except (ConfigError, OSError) as exc:
        print(f"liver4d {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        out = COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"liver4d {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

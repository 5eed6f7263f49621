"""Run configuration: one YAML file with the key names of the typed configs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .model import UNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PhantomOptions:
    n_offsets: int = 20
    offset_step_mm: float = 4.0
    n_pairs: int = 180
    reference_length: int = 513
    navigator_offset_mm: float = 0.0


@dataclass
class EvaluationOptions:
    tre_offsets_mm: list[float] = field(default_factory=lambda: [32.0, 0.0, -20.0, -32.0])
    n_validation: int = 500
    stratify_by_offset: bool = True
    cycle_start_pair: int = 0
    stride: int = 1
    ablation_fractions: list[float] = field(default_factory=lambda: [0.05, 0.10, 0.25, 0.50, 0.75, 0.98])
    patch_radius: int = 8
    search_radius: int = 8


@dataclass
class RunConfig:
    dataset_root: str | None = None
    subject_ids: list[str] | None = None
    phantom_spec: str | None = None
    n_subjects: int = 1
    # canonical grid of prepared data: (sagittal, rows, cols) voxels and isotropic spacing in mm
    grid_shape: list[int] = field(default_factory=lambda: [209, 128, 128])
    grid_spacing: float = 1.8
    phantom: PhantomOptions = field(default_factory=PhantomOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    evaluation: EvaluationOptions = field(default_factory=EvaluationOptions)
    out: str = "run"
    seed: int = 0
    quick: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        return d

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _merge(obj, values: dict, where: str):
    """Return a copy of dataclass ``obj`` with ``values`` applied; unknown keys are errors."""
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    names = {f.name for f in fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    updates = {}
    for key, value in values.items():
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            updates[key] = _merge(current, value, f"{where}.{key}" if where else key)
        else:
            updates[key] = value
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


QUICK_PROFILE = {
    "phantom": {"n_offsets": 5, "n_pairs": 40, "reference_length": 8},
    "train": {"epochs": 2, "batch_size": 16},
    "model": {"base_filters": 4},
    "evaluation": {"tre_offsets_mm": [8.0, 0.0, -4.0, -8.0], "n_validation": 10, "stride": 2,
                   "ablation_fractions": [0.5, 1.0]},
}


def load_config(path=None, quick: bool = False) -> RunConfig:
    cfg = RunConfig()
    if quick:
        cfg = _merge(cfg, QUICK_PROFILE, "")
        cfg = replace(cfg, quick=True)
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = _merge(cfg, values, "")
    return cfg


def resolve(cfg: RunConfig, out=None, seed=None, n_subjects=None, stride=None) -> RunConfig:
    """Apply command-line overrides; the run seed drives every component seed."""
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if n_subjects is not None:
        cfg = replace(cfg, n_subjects=int(n_subjects))
    if stride is not None:
        cfg = replace(cfg, evaluation=replace(cfg.evaluation, stride=int(stride)))
    augmentation = replace(cfg.train.augmentation, seed=cfg.seed)
    return replace(cfg,
                   train=replace(cfg.train, seed=cfg.seed, augmentation=augmentation),
                   model=replace(cfg.model, seed=cfg.seed))

"""Per-subject training loop: MSE loss, Adam, on-the-fly augmentation."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import dataio
from .model import UNet, UNetConfig, build, forward, save_weights, to_tensor
from .preprocess import AugmentationConfig, SampleSet, draw_transform

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.000413
    epochs: int = 200
    dropout: float = 0.15
    shuffle: bool = True
    batchnorm: bool = False
    batch_size: int = 32
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    data_fraction: float = 1.0
    # None runs every epoch; an integer stops after that many epochs without validation gain
    patience: int | None = None
    min_delta: float = 0.0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 < self.data_fraction <= 1:
            raise ValueError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"]["scale_range"] = list(self.augmentation.scale_range)
        return d


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    wall_time_s: float
    best_epoch: int
    n_train: int
    n_val: int
    config: dict
    model_config: dict
    final_weights: str | None = None
    best_weights: str | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory) -> None:
        directory = Path(directory)
        dataio.write_json(directory / "train_report.json", self.to_dict())
        with open(directory / "losses.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                writer.writerow([i, repr(tr), repr(va)])


def loss_mse(prediction, label) -> float:
    prediction = np.asarray(prediction, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if prediction.shape != label.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {label.shape}")
    return float(np.mean((prediction - label) ** 2))


def _offsets_of(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.offsets
    return np.asarray([s.target_offset for s in samples], dtype=np.float64)


def nested_order(offsets: Sequence[float], seed: int) -> np.ndarray:
    """Sample order whose every prefix is a stratified subset.

    Within each offset stratum samples get a random rank ``r``; ordering all
    samples by ``(r + 0.5) / n_stratum`` interleaves the strata proportionally.
    """
    offsets = np.round(np.asarray(offsets, dtype=np.float64), 3)
    rng = np.random.default_rng(seed)
    key = np.empty(offsets.size)
    for value in np.unique(offsets):
        members = np.flatnonzero(offsets == value)
        ranks = rng.permutation(members.size)
        key[members] = (ranks + 0.5) / members.size
    tiebreak = rng.random(offsets.size)
    return np.lexsort((tiebreak, key))


def subsample_training_data(samples, fraction: float, seed: int = 0):
    """Stratified subset of ``round(fraction * N)`` samples, nested across fractions at a fixed seed."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(samples)
    keep = np.sort(nested_order(_offsets_of(samples), seed)[: int(round(fraction * n))])
    if isinstance(samples, SampleSet):
        return samples.subset(keep)
    return [samples[i] for i in keep]


def evaluate_loss(model: UNet, samples: SampleSet, chunk: int = 64) -> float:
    """Mean MSE over ``samples`` in inference mode (no dropout, no augmentation)."""
    if len(samples) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(samples), chunk):
        idx = np.arange(start, min(start + chunk, len(samples)))
        pred = forward(model, samples.inputs(idx))[..., 0]
        total += float(np.sum((pred.astype(np.float64) - samples.labels[idx]) ** 2))
    return total / (len(samples) * samples.labels[0].size)


def per_sample_loss(model: UNet, samples: SampleSet, chunk: int = 64) -> np.ndarray:
    out = np.empty(len(samples))
    for start in range(0, len(samples), chunk):
        idx = np.arange(start, min(start + chunk, len(samples)))
        pred = forward(model, samples.inputs(idx))[..., 0]
        out[idx] = np.mean((pred.astype(np.float64) - samples.labels[idx]) ** 2, axis=(1, 2))
    return out


def _batch(samples: SampleSet, idx, config: TrainConfig, rng: np.random.Generator):
    x = samples.inputs(idx)
    y = samples.labels[idx]
    if config.augmentation.enabled:
        x = x.copy()
        y = np.array(y)
        for k in range(len(idx)):
            t = draw_transform(config.augmentation, rng)
            x[k] = t.apply(x[k])
            y[k] = t.apply(y[k])
    return to_tensor(x), to_tensor(y[..., None])


def train_subject(train: SampleSet, validation: SampleSet, config: TrainConfig,
                  model_config: UNetConfig | None = None, out_dir=None,
                  model: UNet | None = None) -> tuple[TrainReport, UNet]:
    """Train one subject's network; returns the report and the best-validation model.

    Dropout and batch normalisation follow ``config``; ``data_fraction`` < 1
    trains on a nested stratified subset of ``train``.
    """
    if config.data_fraction < 1:
        train = subsample_training_data(train, config.data_fraction, config.seed)
    if len(train) == 0:
        raise TrainingError("empty training set")
    model_config = replace(model_config or UNetConfig(), dropout_rate=config.dropout,
                           use_batchnorm=config.batchnorm)
    model = model if model is not None else build(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng([config.seed, config.augmentation.seed])
    n = len(train)
    train_hist, val_hist = [], []
    best, best_epoch, best_state = np.inf, 0, None
    stale, stopped = 0, False
    started = time.perf_counter()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = rng.permutation(n) if config.shuffle else np.arange(n)
            running = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y = _batch(train, idx, config, rng)
                optimizer.zero_grad(set_to_none=True)
                loss = torch.mean((model(x) - y) ** 2)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                loss.backward()
                optimizer.step()
                running += loss.item() * len(idx)
            train_hist.append(running / n)
            val = evaluate_loss(model, validation) if len(validation) else train_hist[-1]
            val_hist.append(val)
            log.info("epoch %d train %.5f val %.5f", epoch, train_hist[-1], val)
            if val < best - config.min_delta:
                best, best_epoch, stale = val, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    stopped = True
                    break
    wall = time.perf_counter() - started
    final_state = copy.deepcopy(model.state_dict())
    report = TrainReport(train_hist, val_hist, wall, best_epoch, n, len(validation), config.to_dict(),
                         model_config.to_dict(), stopped_early=stopped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.final_weights = str(save_weights(model, out_dir / "final.weights", train.subject_id).name)
        model.load_state_dict(best_state)
        report.best_weights = str(save_weights(model, out_dir / "best.weights", train.subject_id).name)
        report.write(out_dir)
    else:
        model.load_state_dict(best_state)
    model.final_state = final_state
    model.eval()
    return report, model

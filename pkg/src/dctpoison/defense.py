"""Defender-side checks: fine-tuning on clean data and channel pruning of the last conv layer."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .data import IqaDataset
from .metrics import AlphaGrid, TriggerLike, attack_curves, rmse
from .model import TrainConfig, check_params, conv3_activations, eval_crop_offsets, fit_params, predict_images
from .poison import select_subset
from .validation import check_fraction, check_images, check_labels

DEFAULT_RATES = tuple(round(0.05 * k, 2) for k in range(20))
N_CHANNELS = 64
CROP_SIZE = 48


@dataclass(frozen=True)
class DefenseConfig:
    finetune_fraction: float = 0.2
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    finetune_batch_size: int = 32
    prune_rates: tuple[float, ...] = DEFAULT_RATES
    calibration_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        check_fraction(self.finetune_fraction, "finetune_fraction")
        check_fraction(self.calibration_fraction, "calibration_fraction")
        if self.finetune_epochs < 0:
            raise ValueError(f"finetune_epochs must be >= 0, got {self.finetune_epochs}")
        rates = tuple(float(r) for r in self.prune_rates)
        object.__setattr__(self, "prune_rates", rates)
        if list(rates) != sorted(rates):
            raise ValueError(f"prune rates must be sorted ascending, got {rates}")
        if any(not 0 <= r < 1 for r in rates):
            raise ValueError(f"prune rates must lie in [0, 1), got {rates}")


def clean_subset(ds: IqaDataset, fraction: float, seed: int) -> IqaDataset:
    """Random ``fraction`` of the benign training records."""
    benign = np.flatnonzero((ds.split == "train") & ~ds.poisoned)
    if benign.size == 0:
        raise ValueError("dataset has no benign training records")
    return ds.subset(benign[select_subset(benign.size, fraction, seed)])


@dataclass
class EvalSet:
    """Held-out images for tracking the defence, with crop positions fixed once."""

    images: np.ndarray
    mos: np.ndarray
    trigger: TriggerLike
    delta_y: float
    grid: AlphaGrid = field(default_factory=AlphaGrid)
    n_crops: int = 9
    seed: int = 0

    def __post_init__(self):
        self.images = check_images(self.images)
        self.mos = check_labels(self.mos, len(self.images))
        n, h, w, _ = self.images.shape
        self._offsets = eval_crop_offsets(self.seed, n, self.n_crops, h, w, CROP_SIZE)

    def score(self, params: Mapping[str, np.ndarray]) -> dict[str, float]:
        clean = predict_images(params, self.images, offsets=self._offsets)
        curves = attack_curves(params, self.images, self.trigger, self.delta_y, self.grid, self.n_crops,
                               seed=self.seed, clean_scores=clean)
        return {"rmse": rmse(self.mos, clean), "mmae": curves.mmae, "mmra": curves.mmra}


def fine_tune(params: Mapping[str, np.ndarray], subset: IqaDataset, cfg: DefenseConfig = DefenseConfig(),
              evaluator: EvalSet | None = None) -> tuple[dict[str, np.ndarray], list[dict[str, float]]]:
    """Continue training the whole network on clean records; trace metrics after each epoch."""
    if np.any(subset.poisoned):
        raise ValueError(f"fine-tuning subset holds {int(subset.poisoned.sum())} poisoned records")
    params = check_params(params)
    if cfg.finetune_epochs == 0:
        return {k: v.copy() for k, v in params.items()}, []
    trace: list[dict[str, float]] = []

    def on_epoch(epoch, p, loss):
        row = {"epoch": epoch + 1, "loss": loss}
        if evaluator is not None:
            row.update(evaluator.score(p))
        trace.append(row)

    train_cfg = TrainConfig(epochs=cfg.finetune_epochs, batch_size=cfg.finetune_batch_size, lr=cfg.finetune_lr,
                            seed=cfg.seed)
    tuned, _ = fit_params(subset.images, subset.mos, train_cfg, params=params, on_epoch=on_epoch)
    return tuned, trace


def channel_importance(params: Mapping[str, np.ndarray], images: np.ndarray) -> np.ndarray:
    """Mean absolute post-relu conv3 activation per channel."""
    acts = conv3_activations(check_params(params), check_images(images))
    return np.abs(acts).mean(axis=(0, 2, 3), dtype=np.float64)


def channel_prune(params: Mapping[str, np.ndarray], rate: float, calibration: np.ndarray,
                  importance: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Zero the ``floor(rate * 64)`` least active conv3 channels and their head weights."""
    if not 0 <= rate < 1:
        raise ValueError(f"pruning rate must lie in [0, 1), got {rate}")
    out = {k: v.copy() for k, v in check_params(params).items()}
    k = math.floor(round(rate * N_CHANNELS, 9))
    if k == 0:
        return out
    if importance is None:
        importance = channel_importance(params, calibration)
    drop = np.argsort(importance, kind="stable")[:k]
    out["conv3.weight"][drop] = 0.0
    out["conv3.bias"][drop] = 0.0
    out["head.weight"][:, drop] = 0.0
    return out


@dataclass
class SweepTable:
    rows: list[dict[str, float]]
    config: dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        lines = ["beta,rmse,mmae,mmra"]
        lines += [f"{r['beta']!r},{r['rmse']!r},{r['mmae']!r},{r['mmra']!r}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "config": self.config}, indent=2, sort_keys=True) + "\n"


def defense_sweep(params: Mapping[str, np.ndarray], calibration: np.ndarray, evaluator: EvalSet,
                  cfg: DefenseConfig = DefenseConfig()) -> SweepTable:
    """Prune an independent copy of ``params`` at every rate and evaluate it."""
    params = check_params(params)
    importance = channel_importance(params, calibration)
    rows = []
    for beta in cfg.prune_rates:
        pruned = channel_prune(params, beta, calibration, importance=importance)
        rows.append({"beta": beta, **evaluator.score(pruned)})
    config = {"prune_rates": list(cfg.prune_rates), "calibration_size": len(calibration),
              "eval_size": len(evaluator.images), "n_crops": evaluator.n_crops, "eval_seed": evaluator.seed,
              "delta_y": evaluator.delta_y}
    return SweepTable(rows, config)


def calibration_images(ds: IqaDataset, cfg: DefenseConfig) -> np.ndarray:
    """Benign training images for ranking channels, drawn independently of the fine-tuning subset."""
    return clean_subset(ds, cfg.calibration_fraction, cfg.seed + 1).images



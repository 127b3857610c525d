"""Benign IQA metrics and backdoor attack metrics."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol

import numpy as np
from scipy.stats import rankdata

from .dct import psnr
from .model import eval_crop_offsets, predict_images
from .validation import check_images, check_same_length

DEFAULT_ALPHAS = tuple(sorted({s * k / 10 for k in range(1, 11) for s in (-1, 1)}))


class DegenerateMetricWarning(UserWarning):
    """A correlation was requested on a constant vector."""


def rmse(y, f) -> float:
    y, f = check_same_length(y, f)
    return math.sqrt(float(np.mean((y - f) ** 2)))


def srocc(y, f) -> float:
    """Spearman rank-order correlation, ``1 - 6 sum(d^2) / (N (N^2 - 1))`` on average ranks."""
    y, f = check_same_length(y, f)
    n = y.size
    if n < 2:
        raise ValueError("srocc needs at least two samples")
    if np.ptp(y) == 0 or np.ptp(f) == 0:
        warnings.warn("srocc of a constant vector is undefined; returning 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    d = rankdata(y) - rankdata(f)
    return 1.0 - 6.0 * float(np.sum(d * d)) / (n * (n * n - 1))


def plcc(y, f) -> float:
    """Pearson linear correlation coefficient."""
    y, f = check_same_length(y, f)
    if y.size < 2:
        raise ValueError("plcc needs at least two samples")
    dy = y - y.mean()
    df = f - f.mean()
    denom = math.sqrt(float(np.sum(dy * dy)) * float(np.sum(df * df)))
    if denom == 0:
        warnings.warn("plcc with zero variance is undefined; returning 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(np.sum(dy * df)) / denom


def benign_metrics(y, f) -> dict[str, float]:
    return {"plcc": plcc(y, f), "srocc": srocc(y, f), "rmse": rmse(y, f)}


@dataclass(frozen=True)
class AlphaGrid:
    values: tuple[float, ...] = DEFAULT_ALPHAS

    def __post_init__(self):
        vals = tuple(float(a) for a in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("alpha grid is empty")
        if any(a == 0 for a in vals):
            raise ValueError("alpha grid must not contain 0 (MRA is undefined there)")
        if any(abs(a) > 1 for a in vals):
            raise ValueError("alpha grid values must lie in [-1, 1]")
        if len(set(vals)) != len(vals):
            raise ValueError("alpha grid values must be distinct")

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)


class TriggerLike(Protocol):
    def apply(self, images: np.ndarray, alpha: float, clip: bool = False) -> np.ndarray: ...


@dataclass
class AttackCurves:
    alphas: list[float]
    mae: list[float]
    mra: list[float]

    @property
    def mmae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def mmra(self) -> float:
        return float(np.mean(self.mra))

    def to_csv(self) -> str:
        lines = ["alpha,mae,mra"]
        lines += [f"{a!r},{m!r},{r!r}" for a, m, r in zip(self.alphas, self.mae, self.mra)]
        return "\n".join(lines) + "\n"


def attack_curves(params: Mapping[str, np.ndarray], images: np.ndarray, trigger: TriggerLike, delta_y: float,
                  grid: AlphaGrid = AlphaGrid(), n_crops: int = 9, crop_size: int = 48, seed: int = 0,
                  clip: bool = True, clean_scores: np.ndarray | None = None) -> AttackCurves:
    """Per-alpha MAE and MRA of the achieved shift ``f(T(x, a t)) - f(x)`` against ``a * delta_y``.

    Clean and triggered copies of an image share the same crop positions.
    """
    if not isinstance(grid, AlphaGrid):
        grid = AlphaGrid(tuple(grid))
    if delta_y <= 0:
        raise ValueError(f"delta_y must be positive, got {delta_y}")
    images = check_images(images, allow_single=True)
    n, h, w, _ = images.shape
    offsets = eval_crop_offsets(seed, n, n_crops, h, w, crop_size)
    base = clean_scores if clean_scores is not None else predict_images(params, images, crop_size=crop_size,
                                                                        offsets=offsets)
    mae, mra = [], []
    for alpha in grid:
        shifted = predict_images(params, trigger.apply(images, alpha, clip=clip), crop_size=crop_size,
                                 offsets=offsets)
        achieved = shifted - base
        target = alpha * delta_y
        mae.append(float(np.mean(np.abs(achieved - target))))
        mra.append(float(np.mean(achieved / target)))
    return AttackCurves(list(grid.values), mae, mra)


@dataclass
class AttackReport:
    benign: dict[str, float]
    curves: AttackCurves
    psnr1: float | None = None
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def mmae(self) -> float:
        return self.curves.mmae

    @property
    def mmra(self) -> float:
        return self.curves.mmra

    def to_dict(self) -> dict[str, Any]:
        psnr1 = self.psnr1
        if psnr1 is not None and math.isinf(psnr1):
            psnr1 = "inf"
        return {
            "benign": dict(self.benign),
            "attack": {
                "alpha": list(self.curves.alphas),
                "mae": list(self.curves.mae),
                "mra": list(self.curves.mra),
                "mmae": self.mmae,
                "mmra": self.mmra,
            },
            "psnr1": psnr1,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AttackReport":
        att = d["attack"]
        curves = AttackCurves(list(att["alpha"]), list(att["mae"]), list(att["mra"]))
        psnr1 = d.get("psnr1")
        if psnr1 == "inf":
            psnr1 = math.inf
        return cls(dict(d["benign"]), curves, psnr1, dict(d.get("config", {})))


def mean_psnr(clean: np.ndarray, poisoned: np.ndarray) -> float:
    """Average per-image PSNR over a batch, skipping identical pairs."""
    vals = [psnr(a, b) for a, b in zip(clean, poisoned)]
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def evaluate(params: Mapping[str, np.ndarray], images: np.ndarray, mos, trigger: TriggerLike, delta_y: float,
             grid: AlphaGrid = AlphaGrid(), n_crops: int = 9, crop_size: int = 48, seed: int = 0,
             config: Mapping[str, Any] | None = None) -> AttackReport:
    """Benign metrics, attack curves and PSNR at alpha = 1 in one report."""
    images = check_images(images, allow_single=True)
    n, h, w, _ = images.shape
    offsets = eval_crop_offsets(seed, n, n_crops, h, w, crop_size)
    clean = predict_images(params, images, crop_size=crop_size, offsets=offsets)
    curves = attack_curves(params, images, trigger, delta_y, grid, n_crops, crop_size, seed, clean_scores=clean)
    psnr1 = mean_psnr(images, trigger.apply(images, 1.0, clip=True))
    cfg = {"delta_y": delta_y, "n_crops": n_crops, "crop_size": crop_size, "eval_seed": seed}
    cfg.update(config or {})
    return AttackReport(benign_metrics(mos, clean), curves, psnr1, cfg)

"""Poisoned training-set construction: poison-label and clean-label attacks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator

from .data import IqaDataset
from .metrics import TriggerLike
from .model import check_params, forward_tensor, to_nchw
from .numerics import Rng64, Tape, Tensor, backward, ops
from .validation import check_fraction, check_images, check_labels

ALPHA_STRATEGIES = ("discrete8", "pm1", "uniform")
DISCRETE8_VALUES = (1.0, -1.0, 0.75, -0.75, 0.5, -0.5, 0.25, -0.25)
DISCRETE8_WEIGHTS = (0.2, 0.2, 0.15, 0.15, 0.1, 0.1, 0.05, 0.05)
G_MODES = ("clamp", "identity", "rescale")


@dataclass(frozen=True)
class AlphaSampler:
    """Distribution of the trigger scale for poison-label records.

    ``discrete8``: |alpha| in {1, 3/4, 1/2, 1/4} with probabilities
    {0.4, 0.3, 0.2, 0.1}, sign equiprobable. ``pm1``: +1 or -1.
    ``uniform``: U(-1, 1).
    """

    strategy: str = "discrete8"

    def __post_init__(self):
        if self.strategy not in ALPHA_STRATEGIES:
            raise ValueError(f"unknown alpha strategy {self.strategy!r}; expected one of {ALPHA_STRATEGIES}")

    def sample(self, rng: Rng64) -> float:
        if self.strategy == "discrete8":
            return rng.choice_weighted(DISCRETE8_VALUES, DISCRETE8_WEIGHTS)
        if self.strategy == "pm1":
            return rng.choice_weighted((1.0, -1.0), (0.5, 0.5))
        return rng.uniform(-1.0, 1.0)


def sample_alpha(sampler: AlphaSampler, rng: Rng64) -> float:
    return sampler.sample(rng)


@dataclass(frozen=True)
class PgdConfig:
    epsilon_t: float = 2 / 255
    alpha_t: float = 1 / 255
    iters: int = 20

    def __post_init__(self):
        if self.epsilon_t < 0:
            raise ValueError(f"epsilon_t must be nonnegative, got {self.epsilon_t}")
        if self.alpha_t > self.epsilon_t and self.epsilon_t > 0:
            raise ValueError(f"step alpha_t={self.alpha_t} exceeds bound epsilon_t={self.epsilon_t}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")


@dataclass(frozen=True)
class PoisonSpec:
    ratio: float = 0.2
    delta_y: float = 40.0
    mu_y: float = 50.0
    sampler: AlphaSampler = field(default_factory=AlphaSampler)
    pgd: PgdConfig = field(default_factory=PgdConfig)
    g_mode: str = "clamp"
    seed: int = 0

    def __post_init__(self):
        check_fraction(self.ratio, "ratio")
        if not self.delta_y > 0:
            raise ValueError(f"delta_y must be positive, got {self.delta_y}")
        if self.g_mode not in G_MODES:
            raise ValueError(f"unknown g mode {self.g_mode!r}; expected one of {G_MODES}")


def select_subset(n_eligible: int, ratio: float, seed: int) -> np.ndarray:
    """``ceil(ratio * n)`` positions drawn without replacement, sorted."""
    check_fraction(ratio, "ratio")
    # guard against ratio * n landing a hair above an integer
    share = round(ratio * n_eligible, 9)
    if share < 1:
        raise ValueError(f"ratio {ratio} of {n_eligible} records is less than one record")
    k = math.ceil(share)
    return Rng64(seed).derive(1).sample_without_replacement(n_eligible, k)


def _poison_positions(ds: IqaDataset, spec: PoisonSpec) -> np.ndarray:
    """Dataset indices chosen for poisoning; only training records are eligible."""
    eligible = np.flatnonzero((ds.split == "train") & ~ds.poisoned)
    if eligible.size == 0:
        raise ValueError("dataset has no clean training records to poison")
    return eligible[select_subset(eligible.size, spec.ratio, spec.seed)]


def p_baiqa(ds: IqaDataset, trigger: TriggerLike, spec: PoisonSpec = PoisonSpec()) -> IqaDataset:
    """Poison-label attack: trigger at a sampled alpha, label shifted by ``alpha * delta_y``.

    Shifted labels are clamped to [0, 100]; ``alpha_effective`` records the
    shift actually applied, ``(y' - y) / delta_y``.
    """
    _check_block_alignment(ds, trigger)
    chosen = _poison_positions(ds, spec)
    rng = Rng64(spec.seed).derive(2)
    out = ds.copy()
    for i in chosen:
        alpha = spec.sampler.sample(rng)
        y = float(ds.mos[i])
        y_new = min(100.0, max(0.0, y + alpha * spec.delta_y))
        out.images[i] = trigger.apply(ds.images[i], alpha, clip=True)
        out.mos[i] = y_new
        out.poisoned[i] = True
        out.alpha_effective[i] = (y_new - y) / spec.delta_y
    return out


def _check_block_alignment(ds: IqaDataset, trigger) -> None:
    band = getattr(trigger, "band", None)
    if band is None:
        return
    h, w = ds.image_shape[:2]
    if h < band.block_size or w < band.block_size:
        raise ValueError(f"images {h}x{w} are smaller than the trigger block {band.block_size}")


def targeted_pgd(params: Mapping[str, np.ndarray], images: np.ndarray, target: float, cfg: PgdConfig = PgdConfig(),
                 chunk: int = 64) -> np.ndarray:
    """L-inf sign-gradient descent of ``|f(x) - target|`` on whole images.

    Each iteration steps against the gradient sign, projects back onto the
    ``epsilon_t`` ball around the input and clips to [0, 1].
    """
    images = check_images(images, allow_single=True)
    if not 0 <= target <= 100:
        raise ValueError(f"target must lie in [0, 100], got {target}")
    frozen = {k: Tensor(v) for k, v in check_params(params).items()}
    out = np.empty_like(images)
    for start in range(0, len(images), chunk):
        x0 = images[start:start + chunk].astype(np.float64)
        lo = np.maximum(x0 - cfg.epsilon_t, 0.0)
        hi = np.minimum(x0 + cfg.epsilon_t, 1.0)
        x = x0.copy()
        tgt = Tensor(np.full(len(x0), target, dtype=np.float32))
        for _ in range(cfg.iters):
            xt = Tensor(to_nchw(x), requires_grad=True)
            with Tape() as tape:
                loss = ops.abs_sum(ops.sub(forward_tensor(frozen, xt), tgt))
            grad = backward(tape, loss)[xt].transpose(0, 2, 3, 1)
            x = np.clip(x - cfg.alpha_t * np.sign(grad), lo, hi)
        # fall back to the input wherever float32 rounding would leave the ball
        x32 = x.astype(np.float32)
        over = np.abs(x32.astype(np.float64) - x0) > cfg.epsilon_t
        x32[over] = images[start:start + chunk][over]
        out[start:start + chunk] = x32
    return out


def g_alpha(alphas: np.ndarray, mode: str = "clamp") -> np.ndarray:
    """Map remark-1 alphas into the trigger's [-1, 1] domain."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if mode == "clamp":
        return np.clip(alphas, -1.0, 1.0)
    if mode == "identity":
        return alphas
    if mode == "rescale":
        peak = float(np.max(np.abs(alphas))) if alphas.size else 0.0
        return alphas / peak if peak > 1 else alphas
    raise ValueError(f"unknown g mode {mode!r}")


def c_baiqa(ds: IqaDataset, surrogate: Mapping[str, np.ndarray], trigger: TriggerLike,
            spec: PoisonSpec = PoisonSpec(), use_pgd: bool = True) -> IqaDataset:
    """Clean-label attack: labels untouched, images pushed toward ``mu_y`` then triggered.

    Each selected record gets ``alpha = (y - mu_y) / delta_y`` and is
    replaced by ``T(x', g(alpha) t)`` where ``x'`` is a targeted PGD example
    of ``x`` on the surrogate (or ``x`` itself when ``use_pgd`` is off).
    """
    _check_block_alignment(ds, trigger)
    chosen = _poison_positions(ds, spec)
    alphas = (ds.mos[chosen] - spec.mu_y) / spec.delta_y
    g = g_alpha(alphas, spec.g_mode)
    x = ds.images[chosen]
    if use_pgd:
        x = targeted_pgd(surrogate, x, spec.mu_y, spec.pgd)
    out = ds.copy()
    for k, i in enumerate(chosen):
        out.images[i] = trigger.apply(x[k], float(g[k]), clip=True)
        out.poisoned[i] = True
        out.alpha_effective[i] = g[k]
    return out


class _PoisonEstimator(BaseEstimator):
    def _spec(self) -> PoisonSpec:
        raise NotImplementedError

    def _poison(self, ds: IqaDataset) -> IqaDataset:
        raise NotImplementedError

    def fit_resample(self, X, y):
        """Poison ``(X, y)`` treated as training records; returns the new arrays.

        ``poison_mask_`` and ``alpha_`` describe the replaced records.
        """
        X = check_images(X)
        y = check_labels(y, len(X))
        out = self._poison(IqaDataset.from_arrays(X, y))
        self.poison_mask_ = out.poisoned
        self.alpha_ = out.alpha_effective
        return out.images, out.mos


class PoisonLabelAttack(_PoisonEstimator):
    def __init__(self, trigger=None, ratio=0.2, delta_y=40.0, strategy="discrete8", random_state=0):
        self.trigger = trigger
        self.ratio = ratio
        self.delta_y = delta_y
        self.strategy = strategy
        self.random_state = random_state

    def _spec(self) -> PoisonSpec:
        return PoisonSpec(ratio=self.ratio, delta_y=self.delta_y, sampler=AlphaSampler(self.strategy),
                          seed=self.random_state)

    def _poison(self, ds):
        if self.trigger is None:
            raise ValueError("PoisonLabelAttack needs a trigger")
        return p_baiqa(ds, self.trigger, self._spec())


class CleanLabelAttack(_PoisonEstimator):
    def __init__(self, trigger=None, surrogate=None, ratio=0.2, delta_y=40.0, mu_y=50.0, epsilon_t=2 / 255,
                 alpha_t=1 / 255, pgd_iters=20, use_pgd=True, g_mode="clamp", random_state=0):
        self.trigger = trigger
        self.surrogate = surrogate
        self.ratio = ratio
        self.delta_y = delta_y
        self.mu_y = mu_y
        self.epsilon_t = epsilon_t
        self.alpha_t = alpha_t
        self.pgd_iters = pgd_iters
        self.use_pgd = use_pgd
        self.g_mode = g_mode
        self.random_state = random_state

    def _spec(self) -> PoisonSpec:
        return PoisonSpec(ratio=self.ratio, delta_y=self.delta_y, mu_y=self.mu_y,
                          pgd=PgdConfig(self.epsilon_t, self.alpha_t, self.pgd_iters), g_mode=self.g_mode,
                          seed=self.random_state)

    def _poison(self, ds):
        if self.trigger is None or self.surrogate is None:
            raise ValueError("CleanLabelAttack needs a trigger and a surrogate")
        return c_baiqa(ds, self.surrogate, self.trigger, self._spec(), use_pgd=self.use_pgd)

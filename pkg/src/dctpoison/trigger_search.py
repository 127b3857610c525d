"""Universal adversarial trigger search in the DCT domain, plus baseline triggers."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dct import FrequencyBand, Trigger, trigger_pattern_tensor
from .model import MIN_INPUT, TrainConfig, check_params, fit_params, forward, forward_tensor, to_nchw
from .numerics import AdamState, Rng64, Tape, Tensor, adam_step, backward, ops
from .validation import check_images

log = logging.getLogger(__name__)


class UntrainedSurrogateWarning(UserWarning):
    """The surrogate has all-zero weights, so its input gradient vanishes."""


@dataclass(frozen=True)
class UapConfig:
    epsilon: float = 8 / 255
    lam: float = 1e8
    e1: int = 24
    e2: int = 50
    lr: float = 1e-2
    seed: int = 0
    share_channels: bool = False
    fill_budget: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.e1 < 1 or self.e2 < 1:
            raise ValueError(f"e1 and e2 must be >= 1, got e1={self.e1}, e2={self.e2}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


@dataclass
class SearchResult:
    trigger: Trigger
    effect_history: list[float]
    mse_history: list[float]


def uap_loss(coeffs: Tensor, x_nchw: np.ndarray, clean_score: float, surrogate: Mapping[str, Tensor],
             band: FrequencyBand, epsilon: float, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """``-|f(T(x, t)) - f(x)| + lam * max(MSE(x, T(x, t)), eps^2)`` for one image.

    Returns the loss together with its effectiveness and MSE terms.
    """
    _, _, h, w = x_nchw.shape
    if coeffs.shape[0] == 1:
        coeffs = ops.mul(coeffs, Tensor(np.ones((3, 1), dtype=coeffs.dtype)))
    pattern = ops.reshape(trigger_pattern_tensor(coeffs, band, h, w), (1, 3, h, w))
    x = Tensor(x_nchw)
    x_p = ops.add(x, pattern)
    score = forward_tensor(surrogate, x_p)
    diff = ops.sub(score, Tensor(np.array([clean_score], dtype=np.float32)))
    # |d| written as sign(d) * d with sign(0) = +1: same value, but at t = 0,
    # where d is exactly zero, the subgradient still points somewhere
    direction = np.where(diff.data >= 0, 1.0, -1.0).astype(diff.dtype)
    effect = ops.sum(ops.mul(diff, Tensor(direction)))
    err = ops.mse(x_p, x)
    hinge = ops.clamp(err, lo=epsilon * epsilon)
    loss = ops.sub(ops.scale(hinge, lam), effect)
    return loss, effect, err


def uap_dct_search(images: np.ndarray, surrogate: Mapping[str, np.ndarray], cfg: UapConfig = UapConfig(),
                   band: FrequencyBand | None = None) -> SearchResult:
    """Optimise trigger coefficients by per-sample Adam steps, starting from zero.

    Every epoch visits all images once in an order shuffled from ``cfg.seed``.
    """
    images = check_images(images, min_side=MIN_INPUT, allow_single=True)
    surrogate = check_params(surrogate)
    band = band or FrequencyBand()
    if all(not np.any(v) for k, v in surrogate.items() if k != "head.bias"):
        warnings.warn("surrogate weights are all zero; the trigger search has no gradient signal",
                      UntrainedSurrogateWarning, stacklevel=2)
    clean = forward(surrogate, images)
    frozen = {k: Tensor(v) for k, v in surrogate.items()}
    rows = 1 if cfg.share_channels else 3
    params = {"t": np.zeros((rows, len(band)), dtype=np.float32)}
    state = AdamState.zeros_like(params)
    order_rng = Rng64(cfg.seed)
    effect_hist, mse_hist = [], []
    for epoch in range(cfg.e2):
        effects, errs = 0.0, 0.0
        for i in order_rng.permutation(len(images)):
            t = Tensor(params["t"], requires_grad=True)
            with Tape() as tape:
                loss, effect, err = uap_loss(t, to_nchw(images[i:i + 1]), float(clean[i]), frozen, band,
                                             cfg.epsilon, cfg.lam)
            grads = backward(tape, loss)
            params, state = adam_step(params, {"t": grads[t]}, state, cfg.lr)
            effects += effect.item()
            errs += err.item()
        effect_hist.append(effects / len(images))
        mse_hist.append(errs / len(images))
        log.debug("uap epoch %d: effect %.3f mse %.3e", epoch + 1, effect_hist[-1], mse_hist[-1])
    coeffs = np.repeat(params["t"], 3, axis=0) if cfg.share_channels else params["t"]
    if cfg.fill_budget:
        coeffs = project_to_budget(coeffs, band, cfg.epsilon)
    return SearchResult(Trigger(band, coeffs), effect_hist, mse_hist)


def project_to_budget(coeffs: np.ndarray, band: FrequencyBand, epsilon: float) -> np.ndarray:
    """Rescale coefficients so the unclipped pixel MSE is exactly ``epsilon ** 2``.

    The hinge only caps the energy, and Adam drifts around the cap, so the last
    iterate usually sits somewhat inside the budget. Orthonormal blocks make
    the pixel MSE over three channels equal to ``|coeffs|^2 / (3 * block area)``.
    """
    norm = float(np.linalg.norm(coeffs.astype(np.float64)))
    if norm == 0:
        return coeffs
    target = epsilon * math.sqrt(3 * band.block_size ** 2)
    return (coeffs.astype(np.float64) * (target / norm)).astype(np.float32)


def train_surrogate(images: np.ndarray, labels: np.ndarray, cfg: UapConfig,
                    train_cfg: TrainConfig | None = None) -> dict[str, np.ndarray]:
    """Fit the attacker's surrogate on the poisoning subset for ``cfg.e1`` epochs."""
    train_cfg = replace(train_cfg or TrainConfig(), epochs=cfg.e1, seed=cfg.seed)
    params, _ = fit_params(images, labels, train_cfg)
    return params


# ----------------------------------------------------------------- baselines

BASELINE_KINDS = ("ftrojan-fixed", "blended-noise")


@dataclass(frozen=True)
class BaselineTriggerSpec:
    kind: str = "ftrojan-fixed"
    magnitude: float = 66 / 255
    blend_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}")
        if self.magnitude < 0 or self.blend_weight < 0:
            raise ValueError("magnitude and blend_weight must be nonnegative")


@dataclass
class SpatialNoise:
    """Blended trigger: ``(1 - a w) x + a w noise`` with a fixed full-image noise field."""

    noise: np.ndarray
    weight: float

    def apply(self, images: np.ndarray, alpha: float, clip: bool = False) -> np.ndarray:
        images = np.asarray(images)
        if images.shape[-3:] != self.noise.shape:
            raise ValueError(f"noise field has shape {self.noise.shape}, images have {images.shape[-3:]}")
        if alpha == 0:
            out = images.copy()
        else:
            aw = alpha * self.weight
            out = ((1.0 - aw) * images + aw * self.noise).astype(images.dtype, copy=False)
        if clip:
            np.clip(out, 0.0, 1.0, out=out)
        return out


def ftrojan_magnitude_for_psnr(target_db: float, band: FrequencyBand | None = None) -> float:
    """Constant coefficient giving the requested unclipped PSNR for a full-band fixed trigger."""
    band = band or FrequencyBand()
    return band.block_size * 10 ** (-target_db / 20) / math.sqrt(len(band))


def make_baseline_trigger(spec: BaselineTriggerSpec, band: FrequencyBand | None = None,
                          image_shape: tuple[int, int] = (64, 64)) -> Trigger | SpatialNoise:
    band = band or FrequencyBand()
    if spec.kind == "ftrojan-fixed":
        return Trigger(band, np.full((3, len(band)), spec.magnitude, dtype=np.float32))
    h, w = image_shape
    noise = Rng64(spec.seed).random_array((h, w, 3)).astype(np.float32)
    return SpatialNoise(noise, spec.blend_weight)


class UapDctTrigger(TransformerMixin, BaseEstimator):
    """Trigger search as a transformer.

    ``fit(X, y)`` trains the surrogate for ``e1`` epochs unless one is given,
    then searches the trigger; ``transform(X)`` injects it at ``alpha``.
    """

    def __init__(self, epsilon=8 / 255, lam=1e8, e1=24, e2=50, lr=1e-2, alpha=1.0, share_channels=False,
                 fill_budget=True, random_state=0):
        self.epsilon = epsilon
        self.lam = lam
        self.e1 = e1
        self.e2 = e2
        self.lr = lr
        self.alpha = alpha
        self.share_channels = share_channels
        self.fill_budget = fill_budget
        self.random_state = random_state

    def _config(self) -> UapConfig:
        return UapConfig(epsilon=self.epsilon, lam=self.lam, e1=self.e1, e2=self.e2, lr=self.lr,
                         seed=self.random_state, share_channels=self.share_channels, fill_budget=self.fill_budget)

    def fit(self, X, y=None, surrogate=None):
        cfg = self._config()
        if surrogate is None:
            if y is None:
                raise ValueError("need labels y to train a surrogate, or pass surrogate=")
            surrogate = train_surrogate(X, y, cfg)
        self.surrogate_ = check_params(surrogate)
        result = uap_dct_search(X, self.surrogate_, cfg)
        self.trigger_ = result.trigger
        self.effect_history_ = result.effect_history
        return self

    def transform(self, X):
        check_is_fitted(self, "trigger_")
        return self.trigger_.apply(check_images(X), self.alpha, clip=True)

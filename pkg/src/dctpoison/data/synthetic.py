"""Procedural images with distortion-derived quality labels.

Each image starts as a smooth random texture, then receives three
distortions of independently drawn severity. The MOS label is a fixed linear
function of the normalised severities, so a model that can see the
distortions can recover the label exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..dct import dct_matrix
from ..numerics import Rng64
from .dataset import IqaDataset

QUANT_BLOCK = 8


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 2000
    size: int = 64
    blur_max: float = 3.0
    noise_max: float = 0.15
    quant_min: float = 1.0
    quant_max: float = 16.0
    blur_weight: float = 25.0
    noise_weight: float = 35.0
    quant_weight: float = 20.0
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"image size must be a positive multiple of 16, got {self.size}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.n_images < 2:
            raise ValueError("need at least two images to form a train/test split")
        if not (self.blur_max > 0 and self.noise_max > 0 and self.quant_max > self.quant_min >= 1):
            raise ValueError("distortion ranges must be nonempty")


def mos_from_severity(cfg: SynthConfig, blur: float, noise: float, quant: float) -> float:
    """Label map: 100 minus weighted severities normalised to [0, 1], clamped to [0, 100]."""
    sb = blur / cfg.blur_max
    sn = noise / cfg.noise_max
    sq = (quant - cfg.quant_min) / (cfg.quant_max - cfg.quant_min)
    mos = 100.0 - cfg.blur_weight * sb - cfg.noise_weight * sn - cfg.quant_weight * sq
    return min(100.0, max(0.0, mos))


def base_texture(rng: Rng64, size: int) -> np.ndarray:
    """Mid-grey canvas with a smooth random field, a gradient, a checkerboard and fine stripes.

    Edge contrast and stripe amplitude are fixed, so every clean image holds
    about the same amount of high-frequency detail and blur or quantisation
    is measurable from the image alone.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size, 3), 0.5)

    # low-frequency random field: bicubic upsampling of a coarse grid
    grid = rng.uniform_array(-0.12, 0.12, (5, 5, 3))
    img += ndimage.zoom(grid, (size / 5, size / 5, 1), order=3, mode="nearest")[:size, :size]

    theta = rng.uniform(0.0, 2 * math.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    img += 0.1 * (ramp - ramp.mean())[..., None] * rng.uniform_array(-1.0, 1.0, 3)

    period = 6 + rng.randint(7)
    ox, oy = rng.randint(period), rng.randint(period)
    idx = np.arange(size)
    checker = (((idx[:, None] + oy) // period + (idx[None, :] + ox) // period) % 2) * 2.0 - 1.0
    img += 0.12 * checker[..., None] * rng.uniform_array(0.6, 1.0, 3)

    freq = rng.uniform(8.0, 12.0)
    phi = rng.uniform(0.0, 2 * math.pi)
    theta = rng.uniform(0.0, math.pi)
    stripes = np.sin(2 * math.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phi)
    img += 0.1 * stripes[..., None] * rng.uniform_array(0.6, 1.0, 3)

    return np.clip(img, 0.05, 0.95)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def dct_quantize(img: np.ndarray, q: float, block: int = QUANT_BLOCK) -> np.ndarray:
    """JPEG-like quantisation on the 0..255 scale with step ``q * (1 + u + v)``."""
    h, w, _ = img.shape
    c = dct_matrix(block)
    steps = q * (1.0 + np.add.outer(np.arange(block), np.arange(block)))
    # (row-block, col-block, channel, 8, 8)
    blocks = (img * 255.0).reshape(h // block, block, w // block, block, 3).transpose(0, 2, 4, 1, 3)
    coeffs = c @ blocks @ c.T
    coeffs = np.round(coeffs / steps) * steps
    out = (c.T @ coeffs @ c).transpose(0, 3, 1, 4, 2).reshape(h, w, 3)
    return out / 255.0


def distort(img: np.ndarray, blur: float, noise: float, quant: float, rng: Rng64) -> np.ndarray:
    out = gaussian_blur(img, blur)
    out = dct_quantize(out, quant)
    if noise > 0:
        out = out + noise * rng.normal_array(out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_record(cfg: SynthConfig, index: int) -> tuple[np.ndarray, float, tuple[float, float, float]]:
    rng = Rng64(cfg.seed).derive(index)
    base = base_texture(rng, cfg.size)
    blur = rng.uniform(0.0, cfg.blur_max)
    noise = rng.uniform(0.0, cfg.noise_max)
    quant = rng.uniform(cfg.quant_min, cfg.quant_max)
    img = distort(base, blur, noise, quant, rng)
    return img.astype(np.float32), mos_from_severity(cfg, blur, noise, quant), (blur, noise, quant)


def gen_synthetic(cfg: SynthConfig = SynthConfig()) -> IqaDataset:
    """Generate the dataset; a pure function of ``cfg``."""
    images = np.empty((cfg.n_images, cfg.size, cfg.size, 3), dtype=np.float32)
    mos = np.empty(cfg.n_images)
    for i in range(cfg.n_images):
        images[i], mos[i], _ = generate_record(cfg, i)
    n_train = int(round(cfg.train_fraction * cfg.n_images))
    n_train = min(max(n_train, 1), cfg.n_images - 1)
    order = Rng64(cfg.seed).derive(0xDA7A).permutation(cfg.n_images)
    split = np.full(cfg.n_images, "test", dtype=object)
    split[order[:n_train]] = "train"
    return IqaDataset(images, mos, split, np.zeros(cfg.n_images, dtype=bool), np.full(cfg.n_images, np.nan))

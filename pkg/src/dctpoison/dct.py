"""Blockwise orthonormal DCT and frequency-domain trigger injection.

Images are ``H x W x 3`` float arrays on the [0, 1] scale. A trigger holds
one coefficient per colour channel per selected frequency; the same
coefficients are added to every ``block_size x block_size`` block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import Tensor, ops

DEFAULT_BLOCK = 16
DEFAULT_BAND_START = 96
DEFAULT_BAND_SIZE = 64


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C[k, i]`` the k-th basis at sample i."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    c[0] /= math.sqrt(2.0)
    c.setflags(write=False)
    return c


def _check_block(block: np.ndarray, n: int | None) -> np.ndarray:
    block = np.asarray(block)
    if block.ndim != 2 or block.shape[0] != block.shape[1] or (n is not None and block.shape[0] != n):
        want = f"{n}x{n}" if n is not None else "square"
        raise ValueError(f"expected a {want} block, got shape {block.shape}")
    return block


def dct2_block(block: np.ndarray, block_size: int | None = DEFAULT_BLOCK) -> np.ndarray:
    b = _check_block(block, block_size)
    c = dct_matrix(b.shape[0])
    return c @ b @ c.T


def idct2_block(coeffs: np.ndarray, block_size: int | None = DEFAULT_BLOCK) -> np.ndarray:
    b = _check_block(coeffs, block_size)
    c = dct_matrix(b.shape[0])
    return c.T @ b @ c


def blockwise_dct(channel: np.ndarray, block_size: int = DEFAULT_BLOCK, inverse: bool = False) -> np.ndarray:
    """Apply (I)DCT to every block of a 2-D array whose sides are block multiples."""
    h, w = channel.shape
    n = block_size
    if h % n or w % n:
        raise ValueError(f"array shape {channel.shape} is not a multiple of block size {n}")
    c = dct_matrix(n)
    blocks = channel.reshape(h // n, n, w // n, n)
    if inverse:
        out = np.einsum("ki,akbl,lj->aibj", c, blocks, c)
    else:
        out = np.einsum("ik,akbl,jl->aibj", c, blocks, c)
    return out.reshape(h, w)


def zigzag_order(n: int) -> list[tuple[int, int]]:
    """JPEG zigzag traversal of an ``n x n`` grid as ``(row, col)`` pairs."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    order = []
    for s in range(2 * n - 1):
        rows = range(max(0, s - n + 1), min(s, n - 1) + 1)
        if s % 2 == 0:
            rows = reversed(rows)
        order.extend((r, s - r) for r in rows)
    return order


@dataclass(frozen=True)
class FrequencyBand:
    """Selected zigzag ranks inside a ``block_size x block_size`` DCT block."""

    block_size: int = DEFAULT_BLOCK
    indices: tuple[int, ...] = field(
        default_factory=lambda: tuple(range(DEFAULT_BAND_START, DEFAULT_BAND_START + DEFAULT_BAND_SIZE)))

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        n2 = self.block_size * self.block_size
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("band indices must be distinct")
        bad = [i for i in self.indices if not 0 <= i < n2]
        if bad:
            raise ValueError(f"band ranks {bad} outside [0, {n2})")

    def __len__(self) -> int:
        return len(self.indices)

    def positions(self) -> list[tuple[int, int]]:
        zz = zigzag_order(self.block_size)
        return [zz[i] for i in self.indices]

    def basis(self) -> np.ndarray:
        """Spatial basis images, shape ``(len(band), block, block)``."""
        return _band_basis(self.block_size, self.indices)


@lru_cache(maxsize=32)
def _band_basis(block_size: int, indices: tuple[int, ...]) -> np.ndarray:
    c = dct_matrix(block_size)
    zz = zigzag_order(block_size)
    out = np.empty((len(indices), block_size, block_size))
    for j, rank in enumerate(indices):
        u, v = zz[rank]
        out[j] = np.outer(c[u], c[v])
    out.setflags(write=False)
    return out


@dataclass
class Trigger:
    """Per-channel DCT coefficients added to every block, shape ``(3, len(band))``."""

    band: FrequencyBand
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float32)
        if self.coeffs.shape != (3, len(self.band)):
            raise ValueError(f"trigger coeffs must have shape (3, {len(self.band)}), got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("trigger coefficients must be finite")

    @classmethod
    def zeros(cls, band: FrequencyBand | None = None) -> "Trigger":
        band = band or FrequencyBand()
        return cls(band, np.zeros((3, len(band)), dtype=np.float32))

    @property
    def block_size(self) -> int:
        return self.band.block_size

    def block_pattern(self) -> np.ndarray:
        """Spatial perturbation of a single block, shape ``(block, block, 3)``."""
        basis = self.band.basis()
        pat = np.tensordot(self.coeffs.astype(np.float64), basis, axes=(1, 0))
        return pat.transpose(1, 2, 0)

    def apply(self, images: np.ndarray, alpha: float, clip: bool = False) -> np.ndarray:
        return inject_trigger(images, self, alpha, clip=clip)


def _check_images(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (3, 4) or x.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 image(s), got shape {x.shape}")
    return x


def tiled_pattern(trigger: Trigger, height: int, width: int) -> np.ndarray:
    n = trigger.block_size
    pat = trigger.block_pattern()
    reps = (-(-height // n), -(-width // n), 1)
    return np.tile(pat, reps)[:height, :width]


def inject_trigger(x: np.ndarray, trigger: Trigger, alpha: float, clip: bool = False) -> np.ndarray:
    """``IDCT(DCT(x) + alpha * t)`` on every block of one image or a batch.

    The transform is linear and orthonormal, so this equals adding
    ``alpha * IDCT(t)`` tiled over the blocks; that form keeps ``alpha == 0``
    bit-exact. Sides that are not block multiples behave as reflect-pad,
    inject, crop: the blocks overhanging the border are simply cut.
    """
    x = _check_images(x)
    if alpha == 0:
        out = x.copy()
    else:
        h, w = x.shape[-3:-1]
        pattern = tiled_pattern(trigger, h, w)
        out = (x + alpha * pattern).astype(x.dtype, copy=False)
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def trigger_pattern_tensor(coeffs: Tensor, band: FrequencyBand, height: int, width: int) -> Tensor:
    """Differentiable tiled trigger pattern, shape ``(3, height, width)``, from ``(3, K)`` coeffs."""
    n = band.block_size
    basis = Tensor(band.basis().reshape(len(band), n * n), dtype=coeffs.dtype)
    block = ops.reshape(ops.matmul(coeffs, basis), (3, n, n))
    return ops.tile2d(block, height, width)


def psnr(x: np.ndarray, x_p: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; ``inf`` when identical."""
    x = np.asarray(x, dtype=np.float64)
    x_p = np.asarray(x_p, dtype=np.float64)
    if x.shape != x_p.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_p.shape}")
    err = float(np.mean((x - x_p) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)

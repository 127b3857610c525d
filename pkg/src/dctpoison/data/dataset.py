from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPLITS = ("train", "test")


@dataclass
class IqaDataset:
    """Images with MOS labels and poisoning bookkeeping.

    Record ``i`` is ``images[i]`` (``H x W x 3`` in [0, 1]) with label
    ``mos[i]`` in [0, 100]. ``alpha_effective`` is NaN for records that carry
    no trigger. Indices are implicit and dense from 0.
    """

    images: np.ndarray
    mos: np.ndarray
    split: np.ndarray
    poisoned: np.ndarray
    alpha_effective: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.mos = np.asarray(self.mos, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=object)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        self.alpha_effective = np.asarray(self.alpha_effective, dtype=np.float64)
        n = len(self.images)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got shape {self.images.shape}")
        for name in ("mos", "split", "poisoned", "alpha_effective"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} images")
        if n and (self.mos.min() < 0 or self.mos.max() > 100):
            raise ValueError("MOS labels must lie in [0, 100]")
        unknown = set(self.split.tolist()) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split tags {sorted(unknown)}")

    @classmethod
    def from_arrays(cls, images, mos, split="train") -> "IqaDataset":
        n = len(images)
        split_arr = np.full(n, split, dtype=object) if isinstance(split, str) else split
        return cls(images, mos, split_arr, np.zeros(n, dtype=bool), np.full(n, np.nan))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "IqaDataset":
        """New dataset holding the selected records, re-indexed from 0."""
        idx = np.asarray(idx)
        return IqaDataset(self.images[idx], self.mos[idx], self.split[idx],
                          self.poisoned[idx], self.alpha_effective[idx])

    def where_split(self, split: str) -> "IqaDataset":
        return self.subset(np.flatnonzero(self.split == split))

    def copy(self) -> "IqaDataset":
        return IqaDataset(self.images.copy(), self.mos.copy(), self.split.copy(),
                          self.poisoned.copy(), self.alpha_effective.copy())

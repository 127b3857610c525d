"""Small convolutional quality regressor.

Three ``conv3x3 -> relu -> avgpool2`` stages, a global average pool and a
linear head produce one score per crop. The same network serves as the
attacker's surrogate and as the victim.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import IqaDataset
from .data import formats
from .numerics import AdamState, Rng64, Tape, Tensor, adam_step, backward, ops
from .validation import check_images, check_labels

log = logging.getLogger(__name__)

ModelParams = dict[str, np.ndarray]

MIN_INPUT = 24
# fixed reparameterisation: inputs centred on mid-grey, head output scaled so
# unit-sized weights already span the MOS range
INPUT_CENTER = 0.5
OUTPUT_GAIN = 32.0
CONV_LAYERS = (("conv1", 3, 16), ("conv2", 16, 32), ("conv3", 32, 64))
PARAM_SHAPES = {
    "conv1.weight": (16, 3, 3, 3), "conv1.bias": (16,),
    "conv2.weight": (32, 16, 3, 3), "conv2.bias": (32,),
    "conv3.weight": (64, 32, 3, 3), "conv3.bias": (64,),
    "head.weight": (1, 64), "head.bias": (1,),
}


def init_params(rng: Rng64) -> ModelParams:
    """He-uniform conv weights, uniform head weights, zero biases."""
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in) if name.startswith("conv") else 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform_array(-bound, bound, shape).astype(np.float32)
    return params


def zero_params() -> ModelParams:
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in PARAM_SHAPES.items()}


def check_params(params: Mapping[str, np.ndarray]) -> ModelParams:
    missing = sorted(set(PARAM_SHAPES) - set(params))
    extra = sorted(set(params) - set(PARAM_SHAPES))
    if missing or extra:
        raise ValueError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
    out = {}
    for name, shape in PARAM_SHAPES.items():
        arr = np.asarray(params[name], dtype=np.float32)
        if arr.shape != shape:
            raise ValueError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
        out[name] = arr
    return out


def num_parameters() -> int:
    return sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))


def forward_tensor(p: Mapping[str, Tensor], x: Tensor, upto: str | None = None) -> Tensor:
    """Scores for an NCHW batch; ``upto='conv3'`` returns that layer's post-relu map."""
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an N x 3 x H x W batch, got shape {x.shape}")
    if min(x.shape[2:]) < MIN_INPUT:
        raise ValueError(f"crops must be at least {MIN_INPUT}x{MIN_INPUT}, got {x.shape[2]}x{x.shape[3]}")
    h = ops.add(x, Tensor(np.array(-INPUT_CENTER, dtype=x.dtype)))
    for name, _, out_ch in CONV_LAYERS:
        h = ops.conv2d(h, p[f"{name}.weight"])
        h = ops.add(h, ops.reshape(p[f"{name}.bias"], (1, out_ch, 1, 1)))
        h = ops.relu(h)
        if upto == name:
            return h
        h = ops.avgpool2d(h, 2)
    h = ops.global_avgpool(h)
    out = ops.scale(ops.matmul(h, ops.transpose(p["head.weight"], (1, 0))), OUTPUT_GAIN)
    out = ops.add(out, p["head.bias"])
    return ops.reshape(out, (-1,))


def forward(params: Mapping[str, np.ndarray], crops: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Score an ``N x H x W x 3`` batch; one float per crop."""
    crops = np.asarray(crops)
    if crops.ndim != 4 or crops.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 crops, got shape {crops.shape}")
    p = {k: Tensor(v) for k, v in params.items()}
    out = [forward_tensor(p, Tensor(to_nchw(crops[i:i + batch_size]))).data
           for i in range(0, len(crops), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def conv3_activations(params: Mapping[str, np.ndarray], crops: np.ndarray, batch_size: int = 256) -> np.ndarray:
    p = {k: Tensor(v) for k, v in params.items()}
    out = [forward_tensor(p, Tensor(to_nchw(crops[i:i + batch_size])), upto="conv3").data
           for i in range(0, len(crops), batch_size)]
    return np.concatenate(out)


def gather_crops(images: np.ndarray, rows: np.ndarray, cols: np.ndarray, size: int) -> np.ndarray:
    """``images[k, rows[k]:rows[k]+size, cols[k]:cols[k]+size]`` for each k, NHWC."""
    k = np.arange(len(images))[:, None, None]
    r = rows[:, None, None] + np.arange(size)[None, :, None]
    c = cols[:, None, None] + np.arange(size)[None, None, :]
    return images[k, r, c]


def crop_offsets(rng: Rng64, count: int, height: int, width: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    if size > height or size > width:
        raise ValueError(f"crop size {size} exceeds image size {height}x{width}")
    rows = np.array([rng.randint(height - size + 1) for _ in range(count)], dtype=np.int64)
    cols = np.array([rng.randint(width - size + 1) for _ in range(count)], dtype=np.int64)
    return rows, cols


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    crop_size: int = 48
    crops_per_eval: int = 9
    seed: int = 0
    loss: str = "l1"
    schedule: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.crop_size < MIN_INPUT:
            raise ValueError(f"crop_size must be >= {MIN_INPUT}, got {self.crop_size}")
        if self.loss not in ("l1", "mse"):
            raise ValueError(f"loss must be 'l1' or 'mse', got {self.loss!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Step size for a 0-based epoch; cosine decays to zero over the run."""
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


def _loss(scores: Tensor, target: np.ndarray, kind: str) -> Tensor:
    t = Tensor(target.astype(np.float32))
    if kind == "mse":
        return ops.mse(scores, t)
    return ops.scale(ops.abs_sum(ops.sub(scores, t)), 1.0 / len(target))


def fit_params(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               params: ModelParams | None = None,
               on_epoch: Callable[[int, ModelParams, float], None] | None = None) -> tuple[ModelParams, list[float]]:
    """Minibatch Adam on one random crop per image; returns params and per-epoch mean loss.

    A fresh model gets its head bias set to the label median, the L1-optimal
    constant, so the convolutional layers only have to learn deviations.
    """
    images = check_images(images, min_side=cfg.crop_size)
    labels = check_labels(labels, len(images))
    rng = Rng64(cfg.seed)
    if params is None:
        params = init_params(rng.derive(1))
        params["head.bias"][:] = np.median(labels)
    else:
        params = {k: v.copy() for k, v in check_params(params).items()}
    state = AdamState.zeros_like(params)
    stream = rng.derive(2)
    n, h, w, _ = images.shape
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = stream.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rows, cols = crop_offsets(stream, len(idx), h, w, cfg.crop_size)
            crops = gather_crops(images[idx], rows, cols, cfg.crop_size)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with Tape() as tape:
                loss = _loss(forward_tensor(leaves, Tensor(to_nchw(crops))), labels[idx], cfg.loss)
            grads = backward(tape, loss)
            params, state = adam_step(params, {k: grads[t] for k, t in leaves.items()}, state, lr)
            total += loss.item() * len(idx)
        history.append(total / n)
        log.debug("epoch %d loss %.4f", epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, params, history[-1])
    return params, history


def train(dataset: IqaDataset, cfg: TrainConfig) -> ModelParams:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params, _ = fit_params(dataset.images, dataset.mos, cfg)
    return params


def predict_multicrop(params: Mapping[str, np.ndarray], image: np.ndarray, n_crops: int, rng: Rng64,
                      crop_size: int = 48) -> float:
    """Mean score over ``n_crops`` random crops of one ``H x W x 3`` image."""
    if n_crops < 1:
        raise ValueError(f"n_crops must be >= 1, got {n_crops}")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    rows, cols = crop_offsets(rng, n_crops, h, w, min(crop_size, h, w))
    crops = gather_crops(np.broadcast_to(image, (n_crops,) + image.shape), rows, cols, min(crop_size, h, w))
    return float(forward(params, crops).mean(dtype=np.float64))


def eval_crop_offsets(seed: int, count: int, n_crops: int, height: int, width: int,
                      crop_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-image crop positions, image ``i`` drawn from substream ``(seed, i)``."""
    size = min(crop_size, height, width)
    base = Rng64(seed)
    rows = np.empty((count, n_crops), dtype=np.int64)
    cols = np.empty((count, n_crops), dtype=np.int64)
    for i in range(count):
        rows[i], cols[i] = crop_offsets(base.derive(i), n_crops, height, width, size)
    return rows, cols


def predict_images(params: Mapping[str, np.ndarray], images: np.ndarray, n_crops: int = 9, crop_size: int = 48,
                   seed: int = 0, offsets: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Multi-crop score for every image in a batch.

    Passing the same ``offsets`` for clean and triggered copies of a test set
    gives paired predictions whose difference isolates the trigger effect.
    """
    images = check_images(images, min_side=MIN_INPUT, allow_single=True)
    n, h, w, _ = images.shape
    size = min(crop_size, h, w)
    rows, cols = offsets if offsets is not None else eval_crop_offsets(seed, n, n_crops, h, w, size)
    k = rows.shape[1]
    crops = gather_crops(np.repeat(images, k, axis=0), rows.reshape(-1), cols.reshape(-1), size)
    return forward(params, crops).reshape(n, k).astype(np.float64).mean(axis=1)


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    formats.save_checkpoint(check_params(params), path)


def load_checkpoint(path) -> ModelParams:
    try:
        return check_params(formats.load_checkpoint(path))
    except ValueError as exc:
        if isinstance(exc, formats.FormatError):
            raise
        raise formats.FormatError(f"{path}: {exc}") from None


class QualityRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper around the convolutional regressor.

    ``fit`` trains on ``N x H x W x 3`` images in [0, 1] with MOS targets;
    ``predict`` averages ``n_eval_crops`` random crops per image.
    """

    def __init__(self, epochs=20, batch_size=32, lr=3e-3, crop_size=48, n_eval_crops=9, loss="l1",
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.crop_size = crop_size
        self.n_eval_crops = n_eval_crops
        self.loss = loss
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, crop_size=self.crop_size,
                           crops_per_eval=self.n_eval_crops, seed=self.random_state, loss=self.loss)

    def fit(self, X, y):
        self.params_, self.loss_history_ = fit_params(X, y, self._config())
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict_images(self.params_, X, n_crops=self.n_eval_crops, crop_size=self.crop_size,
                              seed=self.random_state)

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "QualityRegressor":
        est = cls(**kwargs)
        est.params_ = check_params(params)
        est.loss_history_ = []
        return est

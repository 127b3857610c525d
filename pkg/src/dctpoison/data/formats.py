"""Little-endian binary formats for datasets (IQAD), triggers (TRIG) and checkpoints (CKPT).

Loaders parse the whole file before building any object, so a truncated or
malformed file raises :class:`FormatError` without returning partial state.
"""
from __future__ import annotations

import csv
import io
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..dct import FrequencyBand, Trigger
from .dataset import IqaDataset

IQAD_MAGIC = b"IQAD"
TRIG_MAGIC = b"TRIG"
CKPT_MAGIC = b"CKPT"
VERSION = 1

MANIFEST_COLUMNS = ("index", "mos", "split", "poisoned", "alpha_effective")


class FormatError(ValueError):
    """A file does not match the expected binary or CSV layout."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated file (needed {n} bytes at offset {self.pos}, "
                              f"file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def header(self, magic: bytes) -> int:
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"{self.what}: unsupported version {version}, expected {VERSION}")
        return version

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def _f32le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


# ----------------------------------------------------------------- datasets

def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.csv")


def dataset_to_bytes(ds: IqaDataset) -> bytes:
    out = io.BytesIO()
    out.write(IQAD_MAGIC)
    out.write(struct.pack("<II", VERSION, len(ds)))
    _, h, w, c = ds.images.shape
    for i in range(len(ds)):
        out.write(struct.pack("<IIII", i, h, w, c))
        out.write(_f32le(ds.images[i]))
    return out.getvalue()


def manifest_to_text(ds: IqaDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for i in range(len(ds)):
        alpha = ds.alpha_effective[i]
        writer.writerow([i, repr(float(ds.mos[i])), ds.split[i], int(ds.poisoned[i]),
                         "" if math.isnan(alpha) else repr(float(alpha))])
    return buf.getvalue()


def save_dataset(ds: IqaDataset, path) -> None:
    """Write ``path`` (IQAD binary) and ``path.manifest.csv``."""
    atomic_write_bytes(path, dataset_to_bytes(ds))
    atomic_write_text(manifest_path(path), manifest_to_text(ds))


def _parse_manifest(text: str, count: int, what: str):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise FormatError(f"{what}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
    rows = rows[1:]
    if len(rows) != count:
        raise FormatError(f"{what}: manifest has {len(rows)} rows but binary has {count} records")
    mos = np.empty(count)
    split = np.empty(count, dtype=object)
    poisoned = np.zeros(count, dtype=bool)
    alpha = np.full(count, np.nan)
    for i, row in enumerate(rows):
        if len(row) != len(MANIFEST_COLUMNS):
            raise FormatError(f"{what}: manifest row {i} has {len(row)} fields")
        try:
            if int(row[0]) != i:
                raise FormatError(f"{what}: manifest row {i} has index {row[0]}")
            mos[i] = float(row[1])
            poisoned[i] = bool(int(row[3]))
            alpha[i] = float(row[4]) if row[4] else np.nan
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{what}: manifest row {i}: {exc}") from None
        split[i] = row[2]
    return mos, split, poisoned, alpha


def dataset_from_bytes(data: bytes, manifest_text: str, what: str = "IQAD") -> IqaDataset:
    r = _Reader(data, what)
    r.header(IQAD_MAGIC)
    count = r.u32()
    images = []
    shape = None
    for i in range(count):
        index, h, w, c = r.unpack("IIII")
        if index != i:
            raise FormatError(f"{what}: record {i} carries index {index}")
        if shape is None:
            shape = (h, w, c)
        elif (h, w, c) != shape:
            raise FormatError(f"{what}: record {i} has shape {(h, w, c)}; mixed image sizes are unsupported")
        images.append(r.floats(h * w * c).reshape(h, w, c))
    r.finish()
    mos, split, poisoned, alpha = _parse_manifest(manifest_text, count, what)
    stacked = np.stack(images) if images else np.zeros((0, 1, 1, 3), dtype=np.float32)
    try:
        return IqaDataset(stacked, mos, split, poisoned, alpha)
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from None


def load_dataset(path) -> IqaDataset:
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"manifest {mpath} not found next to {path}")
    return dataset_from_bytes(path.read_bytes(), mpath.read_text(encoding="utf-8"), what=str(path))


# ----------------------------------------------------------------- triggers

def trigger_to_bytes(trigger: Trigger) -> bytes:
    band = trigger.band
    out = io.BytesIO()
    out.write(TRIG_MAGIC)
    out.write(struct.pack("<III", VERSION, band.block_size, len(band)))
    out.write(struct.pack(f"<{len(band)}I", *band.indices))
    out.write(struct.pack("<I", trigger.coeffs.shape[0]))
    out.write(_f32le(trigger.coeffs))
    return out.getvalue()


def trigger_from_bytes(data: bytes, what: str = "TRIG") -> Trigger:
    r = _Reader(data, what)
    r.header(TRIG_MAGIC)
    block_size = r.u32()
    band_count = r.u32()
    ranks = r.unpack(f"{band_count}I")
    limit = block_size * block_size
    bad = [k for k in ranks if k >= limit]
    if bad:
        raise FormatError(f"{what}: band ranks {bad} >= block_size^2 = {limit}")
    channels = r.u32()
    if channels != 3:
        raise FormatError(f"{what}: expected 3 channels, got {channels}")
    coeffs = r.floats(channels * band_count).reshape(channels, band_count)
    r.finish()
    try:
        return Trigger(FrequencyBand(block_size, ranks), coeffs)
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_trigger(trigger: Trigger, path) -> None:
    atomic_write_bytes(path, trigger_to_bytes(trigger))


def load_trigger(path) -> Trigger:
    return trigger_from_bytes(Path(path).read_bytes(), what=str(path))


# -------------------------------------------------------------- checkpoints

def checkpoint_to_bytes(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise FormatError(f"CKPT: duplicate tensor names {dupes}")
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"CKPT: tensor name too long ({len(raw)} bytes)")
        if arr.ndim > 0xFF:
            raise FormatError(f"CKPT: tensor {name!r} has rank {arr.ndim}")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(_f32le(arr))
    return out.getvalue()


def checkpoint_from_bytes(data: bytes, what: str = "CKPT") -> dict[str, np.ndarray]:
    r = _Reader(data, what)
    r.header(CKPT_MAGIC)
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what}: tensor name is not valid UTF-8") from None
        if name in tensors:
            raise FormatError(f"{what}: duplicate tensor name {name!r}")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I")
        tensors[name] = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    r.finish()
    return tensors


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes(Path(path).read_bytes(), what=str(path))

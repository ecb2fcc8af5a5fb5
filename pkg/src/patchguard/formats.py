"""On-disk formats.

Dataset (``PGDS``), little-endian::

    b"PGDS"  u8 version=1
    u32 count, rows, cols, channels, classes
    float32 pixels[count][rows][cols][channels]   values in [0, 1]
    uint16  labels[count]

Model checkpoint (``PGMD``), little-endian::

    b"PGMD"  u8 version=1
    u32 rf_rows, rf_cols, stride_rows, stride_cols, image_rows, image_cols
    u32 channels, input_dim, hidden, classes
    float64 w1[input_dim][hidden], b1[hidden], w2[hidden][classes], b2[classes]

Config files are flat ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .geometry import RFGeometry
from .model import LabeledDataset, PatchEnsembleModel
from .tensors import ContractError

DATASET_MAGIC = b"PGDS"
MODEL_MAGIC = b"PGMD"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def header(self, magic: bytes) -> None:
        if self.take(4, "magic") != magic:
            raise FormatError(f"bad magic, expected {magic!r}", 0)
        version = self.take(1, "version")[0]
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)

    def u32(self, count: int, what: str) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def array(self, dtype: str, shape: tuple, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape, dtype=np.int64))
        start = self.pos
        raw = self.take(n * dt.itemsize, what)
        a = np.frombuffer(raw, dtype=dt).reshape(shape)
        if dt.kind == "f" and not np.all(np.isfinite(a)):
            raise FormatError(f"non-finite value in {what}", start)
        return a

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError("trailing bytes after payload", self.pos)


def save_dataset(data: LabeledDataset, path) -> None:
    count, rows, cols, channels = data.images.shape
    if data.class_count > 65535:
        raise ContractError("labels are stored as uint16")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<5I", count, rows, cols, channels, data.class_count))
        fh.write(data.images.astype("<f4").tobytes())
        fh.write(data.labels.astype("<u2").tobytes())


def load_dataset(path) -> LabeledDataset:
    r = _Reader(Path(path).read_bytes())
    r.header(DATASET_MAGIC)
    count, rows, cols, channels, classes = r.u32(5, "dataset header")
    start = r.pos
    pixels = r.array("<f4", (count, rows, cols, channels), "pixels")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise FormatError("pixel outside [0, 1]", start)
    start = r.pos
    labels = r.array("<u2", (count,), "labels")
    if count and labels.max() >= classes:
        raise FormatError("label out of range", start)
    r.finish()
    return LabeledDataset(pixels.astype(np.float64), labels.astype(np.int64), classes)


def save_model(model: PatchEnsembleModel, path) -> None:
    g = model.geom
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<6I", g.rf_rows, g.rf_cols, g.stride_rows, g.stride_cols, g.image_rows, g.image_cols))
        fh.write(struct.pack("<4I", model.channels, model.input_dim, model.hidden, model.classes))
        for a in model.params():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> PatchEnsembleModel:
    r = _Reader(Path(path).read_bytes())
    r.header(MODEL_MAGIC)
    start = r.pos
    geo = r.u32(6, "geometry")
    try:
        geom = RFGeometry(*geo)
    except ContractError as exc:
        raise FormatError(f"invalid geometry: {exc}", start) from None
    start = r.pos
    channels, d_in, hidden, classes = r.u32(4, "layer sizes")
    if d_in != geom.rf_rows * geom.rf_cols * channels or min(hidden, classes, channels) < 1:
        raise FormatError("layer sizes inconsistent with geometry", start)
    w1 = r.array("<f8", (d_in, hidden), "w1")
    b1 = r.array("<f8", (hidden,), "b1")
    w2 = r.array("<f8", (hidden, classes), "w2")
    b2 = r.array("<f8", (classes,), "b2")
    r.finish()
    return PatchEnsembleModel(geom, classes, channels, w1, b1, w2, b2)


def read_config(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ContractError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def write_config(values: Dict[str, object], path) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")


def fmt(value) -> str:
    """Stable text form for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

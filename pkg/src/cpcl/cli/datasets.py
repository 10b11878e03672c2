"""Dataset files: IDX image/label pairs (optionally gzipped) and CSV."""

from __future__ import annotations

import csv
import gzip
from dataclasses import dataclass

import numpy as np

FORMATS = ("csv_labels_last", "idx_pair")
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LoadedData:
    x: np.ndarray
    y: np.ndarray
    label_names: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape

    def describe(self) -> str:
        return f"{self.x.shape[0]} x {self.x.shape[1]} features, {len(self.label_names)} classes"


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        try:
            blob = gzip.decompress(blob)
        except (OSError, EOFError) as exc:
            raise DatasetError(f"{path}: corrupt gzip stream ({exc})") from None
    return blob


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array of its declared shape."""
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise DatasetError(f"{path}: truncated header at byte offset {len(blob)} (need 4 magic bytes)")
    if blob[0] != 0 or blob[1] != 0 or blob[2] not in _IDX_TYPES:
        raise DatasetError(f"{path}: bad idx magic {blob[:4].hex()} at byte offset 0")
    ndim = blob[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(blob) < header:
        raise DatasetError(f"{path}: truncated header at byte offset {len(blob)} (need {header} bytes)")
    dims = tuple(int.from_bytes(blob[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    dtype = np.dtype(_IDX_TYPES[blob[2]])
    need = int(np.prod(dims)) * dtype.itemsize
    have = len(blob) - header
    if have < need:
        raise DatasetError(f"{path}: truncated data at byte offset {len(blob)}: "
                           f"dims {dims} need {need} bytes after the {header}-byte header, found {have}")
    if have > need:
        raise DatasetError(f"{path}: {have - need} trailing bytes after byte offset {header + need}")
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def _encode_labels(raw: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    names, codes = np.unique(raw, return_inverse=True)
    return codes.astype(np.int64), tuple(str(v) for v in names)


def _unit_scale(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if 0.0 <= lo and hi <= 1.0:
        return x
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def load_idx_pair(images_path, labels_path) -> LoadedData:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: labels must be one-dimensional, got dims {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"dimension mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    else:
        x = _unit_scale(x)
    y, names = _encode_labels(labels)
    return LoadedData(x, y, names)


def load_csv(path) -> LoadedData:
    """Numeric feature columns followed by a label column; no header row."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if rows and len(row) != len(rows[0]):
                raise DatasetError(f"{path}: ragged csv, line {lineno} has {len(row)} fields, expected {len(rows[0])}")
            rows.append(row)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    if len(rows[0]) < 2:
        raise DatasetError(f"{path}: need at least one feature column and a label column")
    try:
        x = np.array([[float(c) for c in r[:-1]] for r in rows])
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric feature ({exc})") from None
    labels = [r[-1].strip() for r in rows]
    try:
        raw = np.array([int(v) for v in labels])
    except ValueError:
        raw = np.array(labels)
    y, names = _encode_labels(raw)
    return LoadedData(_unit_scale(x), y, names)


def load_dataset(path, fmt: str = "idx_pair", labels_path=None) -> LoadedData:
    if fmt not in FORMATS:
        raise DatasetError(f"unknown dataset format {fmt!r}; choose from {FORMATS}")
    if fmt == "csv_labels_last":
        return load_csv(path)
    if not labels_path:
        raise DatasetError("idx_pair needs a labels file (dataset.labels)")
    return load_idx_pair(path, labels_path)

"""On-disk formats and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..attacks import Dataset

DATA_MAGIC = b"MMBDDATA"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps_dataset(ds: Dataset) -> bytes:
    header = {
        "num_classes": int(ds.num_classes),
        "sample_shape": list(ds.x.shape[1:]),
        "count": int(ds.x.shape[0]),
        "poison_count": 0 if ds.poison_idx is None else int(len(ds.poison_idx)),
        "poison_table": ds.poison_idx is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(hbytes)), hbytes,
             np.ascontiguousarray(ds.x, dtype="<f8").tobytes(),
             np.ascontiguousarray(ds.y, dtype="<i8").tobytes()]
    if ds.poison_idx is not None:
        parts.append(np.ascontiguousarray(ds.poison_idx, dtype="<i8").tobytes())
    return b"".join(parts)


def loads_dataset(blob: bytes) -> Dataset:
    if blob[: len(DATA_MAGIC)] != DATA_MAGIC or len(blob) < len(DATA_MAGIC) + 8:
        raise DatasetFormatError("not a dataset file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, len(DATA_MAGIC))
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    start = len(DATA_MAGIC) + 8
    try:
        header = json.loads(blob[start : start + hlen].decode())
        n, shape = int(header["count"]), tuple(header["sample_shape"])
        k, npois = int(header["num_classes"]), int(header["poison_count"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"corrupt dataset header: {exc}") from exc
    size = int(np.prod(shape)) if shape else 1
    expected = start + hlen + 8 * (n * size + n + npois)
    if len(blob) != expected:
        raise DatasetFormatError(f"dataset payload is {len(blob)} bytes, expected {expected}")
    off = start + hlen
    x = np.frombuffer(blob, "<f8", n * size, off).astype(np.float64).reshape((n,) + shape)
    off += 8 * n * size
    y = np.frombuffer(blob, "<i8", n, off).astype(np.int64)
    off += 8 * n
    pidx = np.frombuffer(blob, "<i8", npois, off).astype(np.int64)
    if not header.get("poison_table", False):
        pidx = None
    return Dataset(x, y, k, pidx)


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(Path(path), dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

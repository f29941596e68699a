"""PDT1 binary tensor files and checkpoint directories.

File layout: magic b"PDT1", u8 rank, rank u32 little-endian extents, then the
float64 payload in row-major order (little-endian).  Checkpoints are a JSON
index of named parameters next to one PDT1 blob per parameter.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDT1"


class DataError(RuntimeError):
    """Dataset/checkpoint files are missing or malformed."""


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"tensor file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"bad magic in {path}")
    rank = raw[4]
    head = 5 + 4 * rank
    if len(raw) < head:
        raise DataError(f"truncated header in {path}")
    shape = struct.unpack(f"<{rank}I", raw[5:head])
    n = int(np.prod(shape)) if rank else 1
    if len(raw) - head < 8 * n:
        raise DataError(f"truncated payload in {path}")
    payload = np.frombuffer(raw[head:], dtype="<f8", count=n)
    return payload.reshape(shape).astype(np.float64)


def save_params(directory, params: dict[str, np.ndarray]) -> None:
    """Write a checkpoint: index.json plus one blob per named parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, name in enumerate(sorted(params)):
        fname = f"p{i:04d}.pdt1"
        save_tensor(directory / fname, params[name])
        index[name] = {"file": fname, "shape": list(params[name].shape)}
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_params(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise DataError(f"no checkpoint index at {index_path}")
    index = json.loads(index_path.read_text())
    out = {}
    for name, meta in index.items():
        arr = load_tensor(directory / meta["file"])
        if list(arr.shape) != meta["shape"]:
            raise DataError(f"shape mismatch for {name} in {directory}")
        out[name] = arr
    return out

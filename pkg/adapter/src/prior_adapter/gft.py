"""GFT1 tensor container.

Layout: 4 magic bytes "GFT1", u8 rank (2 or 3), rank little-endian u32
dims, then the C-order little-endian f32 payload.  This is the prior
format the reconstruction engine ingests; the writer here is
independent so the adapter carries no engine dependency.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GFT1"


def save_tensor(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise ValueError(f"GFT1 stores rank 2 or 3 tensors, got rank {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    rank = raw[4]
    dims = struct.unpack(f"<{rank}I", raw[5:5 + 4 * rank])
    return np.frombuffer(raw, dtype="<f4", offset=5 + 4 * rank).reshape(dims).copy()

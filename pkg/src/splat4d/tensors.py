"""Dense-array file IO and deterministic RNG streams.

Tensor files use the "GFT1" container: 4 magic bytes, u8 rank, u32 dims
(little-endian), then the row-major channel-last f32 payload.  Images are
8-bit PNG converted to f32 in [0, 1] on load.  RNG streams are
counter-based (Philox) keyed by (seed, label), so draws are reproducible
regardless of thread count or platform.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMagic, DimMismatch, NonFiniteData

TENSOR_MAGIC = b"GFT1"


def save_tensor(path, arr) -> None:
    """Write a 2-D or 3-D float array as a GFT1 file."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise DimMismatch(f"GFT1 stores rank 2 or 3 tensors, got rank {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteData(f"refusing to write non-finite values to {path}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a GFT1 file back into an f32 array of its declared shape."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise BadMagic(f"{path}: expected magic {TENSOR_MAGIC!r}, got {raw[:4]!r}")
    rank = raw[4]
    if rank not in (2, 3):
        raise DimMismatch(f"{path}: unsupported rank {rank}")
    header_end = 5 + 4 * rank
    dims = struct.unpack(f"<{rank}I", raw[5:header_end])
    count = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype="<f4", offset=header_end)
    if payload.size != count:
        raise DimMismatch(
            f"{path}: header declares {count} values, payload holds {payload.size}"
        )
    arr = payload.reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteData(f"{path}: payload contains NaN or Inf")
    return np.array(arr)  # own the memory; file buffer is read-only


def load_image(path) -> np.ndarray:
    """Load an image file as (H, W, 3) f32 in [0, 1].

    Accepts 8-bit PNG (or anything Pillow reads) and GFT1 tensors.
    """
    path = Path(path)
    if path.read_bytes()[:4] == TENSOR_MAGIC:
        arr = load_tensor(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        return arr
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image(path, arr) -> None:
    """Write an (H, W[, 3]) float array in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(arr, dtype=np.float64)
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quant).save(path)


def load_mask(path) -> np.ndarray:
    """Load a PNG as a boolean mask (any nonzero pixel is True)."""
    img = Image.open(path).convert("L")
    return np.asarray(img) > 0


def save_mask(path, mask) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask, dtype=bool) * np.uint8(255))).save(path)


EDGE_EPS = 1e-6     # grid-boundary slack: landings this far out still count


def bilinear_sample(field, pts):
    """Sample a (H, W) or (H, W, C) grid at float pixel coords (N, 2).

    Coordinates are (x, y) with pixel centers at integers.  Returns
    (values, inside) where values is (N,) or (N, C) and inside marks
    points whose full bilinear support lies in [0, W-1] x [0, H-1]
    up to a tiny edge tolerance; outside points sample to 0.
    """
    field = np.asarray(field, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    h, w = field.shape[:2]
    x, y = pts[:, 0], pts[:, 1]
    inside = ((x >= -EDGE_EPS) & (x <= w - 1 + EDGE_EPS)
              & (y >= -EDGE_EPS) & (y <= h - 1 + EDGE_EPS))
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(int)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    if field.ndim == 3:
        fx = fx[:, None]
        fy = fy[:, None]
    val = ((1 - fy) * ((1 - fx) * field[y0, x0] + fx * field[y0, x1])
           + fy * ((1 - fx) * field[y1, x0] + fx * field[y1, x1]))
    val[~inside] = 0.0
    return val, inside


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Deterministic random stream keyed by (seed, label).

    Uses the counter-based Philox generator so the sequence depends only
    on the key, never on global state or thread scheduling.
    """
    digest = hashlib.blake2b(
        label.encode("utf-8"),
        digest_size=16,
        key=int(seed).to_bytes(8, "little", signed=False),
    ).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))

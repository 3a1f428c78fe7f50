"""Columnar container for the 3D Gaussian point set.

Each point carries geometry (center, log-scale, rotation quaternion),
appearance (logit opacity, RGB color), a stable u64 id that survives
densification and relocation (the basis of tracking), a Still/Moving
cluster label, and the frame it was created on.

Scale and opacity are stored in log/logit form so gradient steps can
never violate positivity or the (0, 1) opacity range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .errors import BadMagic, LengthMismatch, NonFiniteData, UnknownId

STILL = 0
MOVING = 1

SCENE_MAGIC = b"GFS1"


def encode_scale(s) -> np.ndarray:
    return np.log(np.asarray(s, dtype=np.float64))

def decode_scale(s_log) -> np.ndarray:
    return np.exp(np.asarray(s_log, dtype=np.float64))

def encode_alpha(a) -> np.ndarray:
    return logit(np.asarray(a, dtype=np.float64))

def decode_alpha(a_logit) -> np.ndarray:
    return expit(np.asarray(a_logit, dtype=np.float64))


def quat_to_rot_batch(q) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z), normalized here, to (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class GaussianScene:
    mu: np.ndarray          # (N, 3) float64
    s_log: np.ndarray       # (N, 3) float64
    alpha_logit: np.ndarray  # (N,)  float64
    q: np.ndarray           # (N, 4) float64, (w, x, y, z)
    color: np.ndarray       # (N, 3) float64 in [0, 1]
    ids: np.ndarray = field(default=None)      # (N,) uint64
    cluster: np.ndarray = field(default=None)  # (N,) uint8
    birth: np.ndarray = field(default=None)    # (N,) uint32

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.s_log = np.ascontiguousarray(self.s_log, dtype=np.float64).reshape(n, 3)
        self.alpha_logit = np.ascontiguousarray(self.alpha_logit, dtype=np.float64).reshape(n)
        self.q = np.ascontiguousarray(self.q, dtype=np.float64).reshape(n, 4)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64).reshape(n, 3)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.uint64)
        else:
            self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64).reshape(n)
        if self.cluster is None:
            self.cluster = np.full(n, STILL, dtype=np.uint8)
        else:
            self.cluster = np.ascontiguousarray(self.cluster, dtype=np.uint8).reshape(n)
        if self.birth is None:
            self.birth = np.zeros(n, dtype=np.uint32)
        else:
            self.birth = np.ascontiguousarray(self.birth, dtype=np.uint32).reshape(n)
        if len(np.unique(self.ids)) != n:
            raise LengthMismatch("gaussian ids must be unique")
        self._next_id = int(self.ids.max()) + 1 if n else 0

    @staticmethod
    def empty() -> "GaussianScene":
        return GaussianScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                             np.zeros((0, 4)), np.zeros((0, 3)))

    def __len__(self):
        return len(self.mu)

    # --- decoded views ---

    def scales(self) -> np.ndarray:
        return decode_scale(self.s_log)

    def alphas(self) -> np.ndarray:
        return decode_alpha(self.alpha_logit)

    def rotations(self) -> np.ndarray:
        return quat_to_rot_batch(self.q)

    def covariances(self) -> np.ndarray:
        """Per-point 3x3 covariance R diag(s^2) R^T; always symmetric PSD."""
        R = self.rotations()
        s2 = self.scales() ** 2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    # --- structure edits ---

    def append(self, mu, s_log, alpha_logit, q, color,
               cluster=STILL, birth=0) -> np.ndarray:
        """Add points; returns the freshly assigned ids."""
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        k = len(mu)
        new_ids = np.arange(self._next_id, self._next_id + k, dtype=np.uint64)
        self._next_id += k
        self.mu = np.concatenate([self.mu, mu])
        self.s_log = np.concatenate([self.s_log, np.atleast_2d(np.asarray(s_log, dtype=np.float64))])
        self.alpha_logit = np.concatenate([self.alpha_logit, np.atleast_1d(np.asarray(alpha_logit, dtype=np.float64))])
        self.q = np.concatenate([self.q, np.atleast_2d(np.asarray(q, dtype=np.float64))])
        self.color = np.concatenate([self.color, np.atleast_2d(np.asarray(color, dtype=np.float64))])
        self.ids = np.concatenate([self.ids, new_ids])
        cl = np.broadcast_to(np.asarray(cluster, dtype=np.uint8), (k,))
        self.cluster = np.concatenate([self.cluster, cl])
        bf = np.broadcast_to(np.asarray(birth, dtype=np.uint32), (k,))
        self.birth = np.concatenate([self.birth, bf])
        return new_ids

    def keep(self, mask) -> None:
        """Drop points where mask is False. Ids of survivors are untouched."""
        mask = np.asarray(mask, dtype=bool)
        for name in ("mu", "s_log", "alpha_logit", "q", "color",
                     "ids", "cluster", "birth"):
            setattr(self, name, getattr(self, name)[mask])

    def index_of(self, ids) -> np.ndarray:
        """Row indices of the given ids (must all be present)."""
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        if len(ids) == 0:
            return np.zeros(0, dtype=np.intp)
        if len(self.ids) == 0:
            raise UnknownId("scene is empty")
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids, ids, sorter=order)
        rows = order[np.minimum(pos, len(order) - 1)]
        bad = self.ids[rows] != ids
        if bad.any():
            raise UnknownId(f"unknown gaussian id(s): {ids[bad][:5].tolist()}")
        return rows

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.mu.copy(), self.s_log.copy(),
                             self.alpha_logit.copy(), self.q.copy(),
                             self.color.copy(), self.ids.copy(),
                             self.cluster.copy(), self.birth.copy())

    # --- persistence ---

    def save(self, path) -> None:
        """Binary checkpoint: magic, u32 count, then the columns in
        declaration order as little-endian f32, ids as u64, cluster as
        u8, birth frame as u32."""
        cols = [self.mu, self.s_log, self.alpha_logit, self.q, self.color]
        for c in cols:
            if not np.all(np.isfinite(c)):
                raise NonFiniteData("refusing to save non-finite scene")
        parts = [SCENE_MAGIC, struct.pack("<I", len(self))]
        for c in cols:
            parts.append(np.ascontiguousarray(c, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(self.ids, dtype="<u8").tobytes())
        parts.append(np.ascontiguousarray(self.cluster, dtype="u1").tobytes())
        parts.append(np.ascontiguousarray(self.birth, dtype="<u4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @staticmethod
    def load(path) -> "GaussianScene":
        raw = Path(path).read_bytes()
        if raw[:4] != SCENE_MAGIC:
            raise BadMagic(f"expected {SCENE_MAGIC!r}, got {raw[:4]!r}")
        n = struct.unpack("<I", raw[4:8])[0]
        expect = 8 + n * (14 * 4 + 8 + 1 + 4)
        if len(raw) != expect:
            raise LengthMismatch(
                f"checkpoint payload size mismatch ({len(raw)} vs {expect} expected)")
        off = 8
        shapes = [(n, 3), (n, 3), (n,), (n, 4), (n, 3)]
        cols = []
        for shape in shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            cols.append(arr.reshape(shape).astype(np.float64))
            off += count * 4
        ids = np.frombuffer(raw, dtype="<u8", count=n, offset=off).copy()
        off += n * 8
        cluster = np.frombuffer(raw, dtype="u1", count=n, offset=off).copy()
        off += n
        birth = np.frombuffer(raw, dtype="<u4", count=n, offset=off).copy()
        return GaussianScene(*cols, ids=ids, cluster=cluster, birth=birth)


def covariance3d(s_log, q) -> np.ndarray:
    """Single-point covariance from log-scale and quaternion."""
    scene_like = quat_to_rot_batch(np.asarray(q, dtype=np.float64).reshape(1, 4))[0]
    s2 = decode_scale(s_log) ** 2
    return scene_like @ np.diag(s2) @ scene_like.T


def split_by_mask(scene: GaussianScene, mask, positions):
    """Partition ids by a screen-space movement mask.

    positions are current-frame pixel coordinates per point; a point is
    Moving iff its nearest pixel lies inside the image and the mask is
    set there.  Off-image points fall back to Still.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    pos = np.asarray(positions, dtype=np.float64)
    px = np.rint(pos[:, 0]).astype(int)
    py = np.rint(pos[:, 1]).astype(int)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    moving = np.zeros(len(scene), dtype=bool)
    moving[inside] = mask[py[inside], px[inside]]
    return scene.ids[moving], scene.ids[~moving]

"""Pinhole projection and an optimizable world-to-camera pose.

Conventions (fixed here, used everywhere):
  * camera looks down +z; a point is visible when its camera-frame z > EPS_Z
  * pixel (row v, col u) has center (u, v); the principal ray hits (cx, cy)
  * extrinsics are world-to-camera: X_cam = R @ X_world + t
  * quaternions are stored (w, x, y, z), unit norm
  * the world frame equals the first camera frame (identity gauge)

Poses are optimized through a 6-vector local tangent (so(3) rotation
increment ++ translation increment) applied by `retract`, so gradient
steps can never leave SO(3).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

EPS_Z = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor)


# --- quaternion helpers (w, x, y, z) ---

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)

def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])

def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])

def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])

def quat_from_rotvec(v) -> np.ndarray:
    """Exponential map: axis-angle 3-vector to unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        half = 0.5 * v
        q = np.array([1.0 - np.dot(half, half) / 2.0, *half])
        return quat_normalize(q)
    axis = v / angle
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])

def rot_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 branch-stable)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[i + 1] = 0.25 * s
        q[j + 1] = (R[j, i] + R[i, j]) / s
        q[k + 1] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)

def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class Extrinsics:
    """World-to-camera transform: rotation quaternion + translation."""
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(self.q)
        self.t = np.asarray(self.t, dtype=np.float64).copy()

    @staticmethod
    def identity() -> "Extrinsics":
        return Extrinsics()

    @staticmethod
    def from_rt(R, t) -> "Extrinsics":
        return Extrinsics(rot_to_quat(R), np.asarray(t, dtype=np.float64))

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def compose(self, inner: "Extrinsics") -> "Extrinsics":
        """self ∘ inner: apply `inner` first, then `self`."""
        R = self.rotation()
        return Extrinsics(quat_mul(self.q, inner.q), R @ inner.t + self.t)

    def inverse(self) -> "Extrinsics":
        R = self.rotation()
        return Extrinsics(quat_conj(self.q), -R.T @ self.t)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation().T @ self.t

    def copy(self) -> "Extrinsics":
        return Extrinsics(self.q.copy(), self.t.copy())


def retract(E: Extrinsics, delta) -> Extrinsics:
    """Apply a 6-vector tangent step: left so(3) increment on rotation,
    plain increment on translation.  Always returns unit-norm rotation."""
    delta = np.asarray(delta, dtype=np.float64)
    dq = quat_from_rotvec(delta[:3])
    return Extrinsics(quat_mul(dq, E.q), E.t + delta[3:])


def transform_points(E: Extrinsics, points) -> np.ndarray:
    """World points (N, 3) to camera frame."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return pts @ E.rotation().T + E.t


def project(mu, K: Intrinsics, E: Extrinsics):
    """Project a world point to (pixel xy, camera depth).

    Raises BehindCamera when the camera-frame z is <= EPS_Z.
    """
    Xc = transform_points(E, mu)[0]
    if Xc[2] <= EPS_Z:
        raise BehindCamera(f"camera-frame depth {Xc[2]:.3g} <= {EPS_Z:g}")
    x = np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])
    return x, float(Xc[2])


def project_points(points, K: Intrinsics, E: Extrinsics):
    """Vectorized projection of (N, 3) world points.

    Returns (xy (N, 2), depth (N,), in_front (N,) bool).  Points behind
    the camera get xy = 0 rather than raising; callers use the mask.
    """
    Xc = transform_points(E, points)
    z = Xc[:, 2]
    in_front = z > EPS_Z
    zs = np.where(in_front, z, 1.0)
    xy = np.stack([K.fx * Xc[:, 0] / zs + K.cx,
                   K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    xy[~in_front] = 0.0
    return xy, z, in_front


def unproject(x, d, K: Intrinsics, E: Extrinsics) -> np.ndarray:
    """Lift pixel coordinates + camera depth back to a world point."""
    if d <= 0:
        raise NonPositiveDepth(f"depth must be > 0, got {d}")
    Xc = np.array([(x[0] - K.cx) / K.fx * d, (x[1] - K.cy) / K.fy * d, d])
    R = E.rotation()
    return R.T @ (Xc - E.t)


def unproject_points(xy, depth, K: Intrinsics, E: Extrinsics) -> np.ndarray:
    """Vectorized unprojection of (N, 2) pixels with (N,) depths."""
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("all depths must be > 0")
    Xc = np.stack([(xy[:, 0] - K.cx) / K.fx * depth,
                   (xy[:, 1] - K.cy) / K.fy * depth,
                   depth], axis=1)
    R = E.rotation()
    return (Xc - E.t) @ R


def projection_jacobians(points, K: Intrinsics, E: Extrinsics):
    """Derivatives of pixel positions for the sparse flow-loss path.

    Returns (d_xy/d_mu (N, 2, 3), d_xy/d_tangent (N, 2, 6), in_front).
    The tangent ordering matches `retract`: rotation first, translation
    second.  Rows for points behind the camera are zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    R = E.rotation()
    Xc = pts @ R.T + E.t
    z = Xc[:, 2]
    in_front = z > EPS_Z
    zs = np.where(in_front, z, 1.0)
    n = len(pts)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * Xc[:, 0] / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * Xc[:, 1] / zs**2
    d_mu = np.einsum("nij,jk->nik", J, R)
    # dXc/d_rot = -[v]x with v = R @ mu, dXc/d_trans = I
    v = Xc - E.t
    dXc_drot = np.zeros((n, 3, 3))
    dXc_drot[:, 0, 1] = v[:, 2]
    dXc_drot[:, 0, 2] = -v[:, 1]
    dXc_drot[:, 1, 0] = -v[:, 2]
    dXc_drot[:, 1, 2] = v[:, 0]
    dXc_drot[:, 2, 0] = v[:, 1]
    dXc_drot[:, 2, 1] = -v[:, 0]
    d_tan = np.zeros((n, 2, 6))
    d_tan[:, :, :3] = np.einsum("nij,njk->nik", J, dXc_drot)
    d_tan[:, :, 3:] = J
    d_mu[~in_front] = 0.0
    d_tan[~in_front] = 0.0
    return d_mu, d_tan, in_front


@dataclass
class Trajectory:
    """Ordered per-frame camera poses (frame indices contiguous from 0)."""
    poses: list  # list of (frame_index, Extrinsics)

    def __post_init__(self):
        idxs = [i for i, _ in self.poses]
        if idxs and idxs != list(range(idxs[0], idxs[0] + len(idxs))):
            raise ValueError("frame indices must be strictly increasing and contiguous")

    def __len__(self):
        return len(self.poses)

    def extrinsics(self, frame: int) -> Extrinsics:
        base = self.poses[0][0]
        return self.poses[frame - base][1]

    def positions(self) -> np.ndarray:
        """Camera centers in world coordinates, (N, 3)."""
        return np.stack([E.camera_center() for _, E in self.poses])

    def save(self, path) -> None:
        """One line per frame: idx tx ty tz qx qy qz qw (camera-to-world)."""
        lines = ["# idx tx ty tz qx qy qz qw  (camera-to-world)"]
        for idx, E in self.poses:
            inv = E.inverse()
            w, x, y, z = inv.q
            tx, ty, tz = inv.t
            lines.append(
                f"{idx} {tx:.17g} {ty:.17g} {tz:.17g} {x:.17g} {y:.17g} {z:.17g} {w:.17g}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "Trajectory":
        poses = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            idx = int(parts[0])
            tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[1:8])
            cam_to_world = Extrinsics(np.array([qw, qx, qy, qz]),
                                      np.array([tx, ty, tz]))
            poses.append((idx, cam_to_world.inverse()))
        return Trajectory(poses)

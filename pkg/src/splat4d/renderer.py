"""Differentiable splatting of the Gaussian set into color/depth/coverage.

Forward model, identical in the tiled and the reference renderer:

  * every Gaussian with camera-frame depth z > EPS_Z is projected; its
    3D covariance is pushed through the local affine (EWA) Jacobian to
    a 2x2 screen covariance, floored by +0.3 px^2 on the diagonal
  * per pixel, the Gaussian contributes
        alpha_tilde = min(alpha * exp(-rho / 2), 0.999)
    with rho the squared Mahalanobis screen distance, and contributes
    nothing where rho > 9 (3-sigma support); the cutoff and clamp are
    part of the definition, so both renderers agree to float precision
  * contributions are composited front-to-back in a single global
    stable depth order; color gets a final transmittance-weighted
    background term; depth is the alpha-normalized expected camera
    depth (0 where coverage is below ACC_EPS)

The tiled renderer culls by conservative axis-aligned bounding boxes
(16x16 px tiles); culled terms are exact no-ops of the composition, so
tiling never changes the result.  The backward pass is analytic and
covers every Gaussian parameter plus the 6-vector camera tangent
(rotation increment first, translation second, as `camera.retract`).

Per-tile results are merged in fixed tile order, so outputs are
bit-identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import EPS_Z, Extrinsics, Intrinsics
from .config import thread_count
from .scene import GaussianScene

TILE = 16
SUPPORT_RHO = 9.0     # (3 sigma)^2 cutoff in Mahalanobis units
ALPHA_MAX = 0.999
COV_FLOOR = 0.3       # px^2, keeps sub-pixel splats invertible
ACC_EPS = 1e-8


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3) in [0, 1]
    depth: np.ndarray          # (H, W), alpha-normalized expected depth
    acc_alpha: np.ndarray      # (H, W) in [0, 1]
    point_xy: np.ndarray       # (N, 2) screen centers (0 where not visible)
    point_depth: np.ndarray    # (N,) camera-frame z
    point_visible: np.ndarray  # (N,) bool


@dataclass
class RenderGrads:
    mu: np.ndarray           # (N, 3)
    s_log: np.ndarray        # (N, 3)
    alpha_logit: np.ndarray  # (N,)
    q: np.ndarray            # (N, 4)
    color: np.ndarray        # (N, 3)
    camera: np.ndarray       # (6,) tangent: rotation xyz, translation xyz


class _Prep:
    """Per-call projected quantities for the depth-sorted visible set."""

    def __init__(self, scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                 H: int, W: int):
        self.n = len(scene)
        R = E.rotation()
        self.R = R
        Xc = scene.mu @ R.T + E.t
        z = Xc[:, 2]
        in_front = z > EPS_Z
        zs = np.where(in_front, z, 1.0)
        xy = np.stack([K.fx * Xc[:, 0] / zs + K.cx,
                       K.fy * Xc[:, 1] / zs + K.cy], axis=1)
        xy[~in_front] = 0.0

        Sigma3 = scene.covariances()
        Sc = np.einsum("ij,njk,lk->nil", R, Sigma3, R)
        J = np.zeros((self.n, 2, 3))
        J[:, 0, 0] = K.fx / zs
        J[:, 0, 2] = -K.fx * Xc[:, 0] / zs**2
        J[:, 1, 1] = K.fy / zs
        J[:, 1, 2] = -K.fy * Xc[:, 1] / zs**2
        M = np.einsum("nij,njk,nlk->nil", J, Sc, J)
        M[:, 0, 0] += COV_FLOOR
        M[:, 1, 1] += COV_FLOOR
        a, b, c = M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]
        det = a * c - b * b
        self.Qa = c / det
        self.Qb = -b / det
        self.Qc = a / det
        lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        radius = 3.0 * np.sqrt(lam_max)

        x0 = np.floor(xy[:, 0] - radius)
        x1 = np.ceil(xy[:, 0] + radius)
        y0 = np.floor(xy[:, 1] - radius)
        y1 = np.ceil(xy[:, 1] + radius)
        on_image = (x1 >= 0) & (x0 <= W - 1) & (y1 >= 0) & (y0 <= H - 1)
        self.visible = in_front & on_image
        self.in_front = in_front
        self.xy_all = xy
        self.z_all = z

        vis = np.flatnonzero(self.visible)
        order = vis[np.argsort(z[vis], kind="stable")]
        self.order = order          # global indices, front to back
        self.xy = xy[order]
        self.z = z[order]
        self.Xc = Xc[order]
        self.J = J[order]
        self.Sc = Sc[order]
        self.Sigma3 = Sigma3[order]
        self.qa = self.Qa[order]
        self.qb = self.Qb[order]
        self.qc = self.Qc[order]
        self.alpha = scene.alphas()[order]
        self.color = scene.color[order]
        self.bbox = np.stack([x0, y0, x1, y1], axis=1)[order]
        self.t = E.t


def _tile_jobs(H: int, W: int):
    jobs = []
    for ty in range(0, H, TILE):
        for tx in range(0, W, TILE):
            jobs.append((tx, ty, min(tx + TILE, W), min(ty + TILE, H)))
    return jobs


def _tile_select(prep: _Prep, tx0, ty0, tx1, ty1) -> np.ndarray:
    bb = prep.bbox
    hit = (bb[:, 0] <= tx1 - 1) & (bb[:, 2] >= tx0) & \
          (bb[:, 1] <= ty1 - 1) & (bb[:, 3] >= ty0)
    return np.flatnonzero(hit)


def _tile_deltas(prep: _Prep, sel, tx0, ty0, tx1, ty1):
    """Pixel-center offsets to each selected center, (P, G) row-major."""
    h, w = ty1 - ty0, tx1 - tx0
    xs = np.arange(tx0, tx1, dtype=np.float64)
    ys = np.arange(ty0, ty1, dtype=np.float64)
    dx = np.broadcast_to((xs[:, None] - prep.xy[sel, 0][None, :])[None],
                         (h, w, len(sel))).reshape(h * w, len(sel)).copy()
    dy = np.broadcast_to((ys[:, None] - prep.xy[sel, 1][None, :])[:, None],
                         (h, w, len(sel))).reshape(h * w, len(sel)).copy()
    return dx, dy


def _tile_weights(prep: _Prep, sel, tx0, ty0, tx1, ty1):
    """Compositing weights for one tile: (pixels P, gaussians G) arrays."""
    dx, dy = _tile_deltas(prep, sel, tx0, ty0, tx1, ty1)
    qa, qb, qc = prep.qa[sel], prep.qb[sel], prep.qc[sel]
    rho = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
    g = np.exp(-0.5 * rho)
    raw = prep.alpha[sel] * g
    at = np.where(rho <= SUPPORT_RHO, np.minimum(raw, ALPHA_MAX), 0.0)
    T = np.cumprod(1.0 - at, axis=1)
    T_in = np.concatenate([np.ones((dx.shape[0], 1)), T[:, :-1]], axis=1)
    w = at * T_in
    return dx, dy, rho, g, raw, at, T_in, T[:, -1], w


def _run_tiles(jobs, fn):
    threads = thread_count()
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, j) for j in jobs]
        return [f.result() for f in futures]


@dataclass
class _ForwardCache:
    """Per-tile intermediates kept for an immediately following backward
    pass over the same scene, pose, and image size."""
    prep: _Prep
    tiles: list     # (job, None | (sel, rho, g, raw, at, T_in, T_out, w))


def _forward(scene, K, E, H, W, background, keep):
    bg = np.asarray(background, dtype=np.float64)
    prep = _Prep(scene, K, E, H, W)
    color = np.empty((H, W, 3))
    color[:] = bg
    depth = np.zeros((H, W))
    acc = np.zeros((H, W))

    def work(job):
        tx0, ty0, tx1, ty1 = job
        sel = _tile_select(prep, tx0, ty0, tx1, ty1)
        if len(sel) == 0:
            return job, None, None
        tup = _tile_weights(prep, sel, tx0, ty0, tx1, ty1)
        _, _, rho, g, raw, at, T_in, T_out, w = tup
        shape = (ty1 - ty0, tx1 - tx0)
        c = (w @ prep.color[sel] + T_out[:, None] * bg).reshape(*shape, 3)
        a = w.sum(axis=1)
        sd = w @ prep.z[sel]
        d = np.where(a > ACC_EPS, sd / np.where(a > ACC_EPS, a, 1.0), 0.0)
        entry = (sel, rho, g, raw, at, T_in, T_out, w) if keep else None
        return job, (c, d.reshape(shape), a.reshape(shape)), entry

    tiles = []
    for job, out, entry in _run_tiles(_tile_jobs(H, W), work):
        if keep:
            tiles.append((job, entry))
        if out is None:
            continue
        tx0, ty0, tx1, ty1 = job
        c, d, a = out
        color[ty0:ty1, tx0:tx1] = c
        depth[ty0:ty1, tx0:tx1] = d
        acc[ty0:ty1, tx0:tx1] = a

    out = RenderOutput(color, depth, np.clip(acc, 0.0, 1.0),
                       prep.xy_all, prep.z_all, prep.visible)
    return out, (_ForwardCache(prep, tiles) if keep else None)


def render(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
           H: int, W: int, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    return _forward(scene, K, E, H, W, background, keep=False)[0]


def render_cached(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                  H: int, W: int, background=(0.0, 0.0, 0.0)):
    """Like render, additionally returning the tile cache that
    render_backward can reuse to skip its forward recomputation."""
    return _forward(scene, K, E, H, W, background, keep=True)


def render_reference(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                     H: int, W: int, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Brute-force oracle: every in-front Gaussian evaluated at every
    pixel, no tiles, no bounding boxes.  Same compositing definition."""
    bg = np.asarray(background, dtype=np.float64)
    R = E.rotation()
    Xc = scene.mu @ R.T + E.t
    z_all = Xc[:, 2]
    in_front = z_all > EPS_Z
    zs = np.where(in_front, z_all, 1.0)
    xy_all = np.stack([K.fx * Xc[:, 0] / zs + K.cx,
                       K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    xy_all[~in_front] = 0.0

    vis = np.flatnonzero(in_front)
    order = vis[np.argsort(z_all[vis], kind="stable")]
    xy = xy_all[order]
    z = z_all[order]
    alpha = scene.alphas()[order]
    col = scene.color[order]

    Sigma3 = scene.covariances()[order]
    Sc = np.einsum("ij,njk,lk->nil", R, Sigma3, R)
    J = np.zeros((len(order), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * Xc[order, 0] / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * Xc[order, 1] / z**2
    M = np.einsum("nij,njk,nlk->nil", J, Sc, J)
    M[:, 0, 0] += COV_FLOOR
    M[:, 1, 1] += COV_FLOOR
    a_, b_, c_ = M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]
    det = a_ * c_ - b_ * b_
    qa, qb, qc = c_ / det, -b_ / det, a_ / det

    color = np.empty((H, W, 3))
    color[:] = bg
    depth = np.zeros((H, W))
    acc = np.zeros((H, W))
    if len(order):
        for i in range(H):
            for j in range(W):
                dx = j - xy[:, 0]
                dy = i - xy[:, 1]
                rho = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                at = np.where(rho <= SUPPORT_RHO,
                              np.minimum(alpha * np.exp(-0.5 * rho), ALPHA_MAX),
                              0.0)
                T = np.cumprod(1.0 - at)
                T_in = np.concatenate([[1.0], T[:-1]])
                w = at * T_in
                color[i, j] = w @ col + T[-1] * bg
                a = w.sum()
                acc[i, j] = a
                depth[i, j] = (w @ z) / a if a > ACC_EPS else 0.0

    # visibility flag matches the tiled renderer's bbox test
    prep = _Prep(scene, K, E, H, W)
    return RenderOutput(color, depth, np.clip(acc, 0.0, 1.0),
                        xy_all, z_all, prep.visible)


def render_backward(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                    d_color, d_depth, background=(0.0, 0.0, 0.0),
                    d_acc=None, cache: _ForwardCache | None = None) -> RenderGrads:
    """Analytic gradients of sum(d_color * color) + sum(d_depth * depth)
    (+ sum(d_acc * acc_alpha) when given) w.r.t. all Gaussian parameters
    and the camera tangent.  Either adjoint may be None (treated as
    zero); at least one must be given to fix the image size.  A cache
    from render_cached with the same scene/pose/size skips the internal
    forward recomputation."""
    bg = np.asarray(background, dtype=np.float64)
    if d_color is None and d_depth is None:
        raise ValueError("need d_color or d_depth to define the image size")
    if d_color is None:
        d_depth = np.asarray(d_depth, dtype=np.float64)
        d_color = np.zeros(d_depth.shape + (3,))
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_depth is None:
        d_depth = np.zeros(d_color.shape[:2])
    d_depth = np.asarray(d_depth, dtype=np.float64)
    H, W = d_depth.shape
    prep = cache.prep if cache is not None else _Prep(scene, K, E, H, W)
    n = len(scene)
    V = len(prep.order)
    grads = RenderGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n),
                        np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(6))
    if V == 0:
        return grads

    # per-pixel accumulators over the sorted visible set
    g_color = np.zeros((V, 3))
    g_alpha = np.zeros(V)
    g_xy = np.zeros((V, 2))
    g_zlin = np.zeros(V)    # adjoint of the composited depth value z_i
    g_qa = np.zeros(V)
    g_qb = np.zeros(V)
    g_qc = np.zeros(V)

    def work(job, entry=None):
        tx0, ty0, tx1, ty1 = job
        if entry is not None:
            sel, rho, g, raw, at, T_in, T_out, w = entry
            dx, dy = _tile_deltas(prep, sel, tx0, ty0, tx1, ty1)
        else:
            sel = _tile_select(prep, tx0, ty0, tx1, ty1)
            if len(sel) == 0:
                return None
            dx, dy, rho, g, raw, at, T_in, T_out, w = _tile_weights(
                prep, sel, tx0, ty0, tx1, ty1)
        P = dx.shape[0]
        dC = d_color[ty0:ty1, tx0:tx1].reshape(P, 3)
        gD = d_depth[ty0:ty1, tx0:tx1].reshape(P)
        accp = w.sum(axis=1)
        sd = w @ prep.z[sel]
        has = accp > ACC_EPS
        inv_acc = np.where(has, 1.0 / np.where(has, accp, 1.0), 0.0)
        Dp = sd * inv_acc
        v_d = gD * inv_acc

        # dL/dw for each (pixel, gaussian)
        b = dC @ prep.color[sel].T
        b += v_d[:, None] * (prep.z[sel][None, :] - Dp[:, None])
        if d_acc is not None:
            b += np.asarray(d_acc, dtype=np.float64)[ty0:ty1, tx0:tx1].reshape(P, 1)

        bw = b * w
        S = np.cumsum(bw[:, ::-1], axis=1)[:, ::-1]
        bg_term = (dC @ bg) * T_out
        U = S - bw + bg_term[:, None]
        d_at = T_in * b - U / (1.0 - at)
        live = (rho <= SUPPORT_RHO) & (raw < ALPHA_MAX)
        d_at = np.where(live, d_at, 0.0)

        p_color = w.T @ dC
        p_zlin = w.T @ v_d
        p_alpha = (g * d_at).sum(axis=0)
        d_rho = -0.5 * g * prep.alpha[sel] * d_at
        rx = 2.0 * (prep.qa[sel] * dx + prep.qb[sel] * dy)
        ry = 2.0 * (prep.qb[sel] * dx + prep.qc[sel] * dy)
        p_xy = np.stack([-(d_rho * rx).sum(axis=0), -(d_rho * ry).sum(axis=0)], axis=1)
        p_qa = (d_rho * dx * dx).sum(axis=0)
        p_qb = (d_rho * 2.0 * dx * dy).sum(axis=0)
        p_qc = (d_rho * dy * dy).sum(axis=0)
        return sel, p_color, p_zlin, p_alpha, p_xy, p_qa, p_qb, p_qc

    if cache is not None:
        parts = [work(job, entry) for job, entry in cache.tiles
                 if entry is not None]
    else:
        parts = _run_tiles(_tile_jobs(H, W), work)
    for out in parts:
        if out is None:
            continue
        sel, p_color, p_zlin, p_alpha, p_xy, p_qa, p_qb, p_qc = out
        g_color[sel] += p_color
        g_zlin[sel] += p_zlin
        g_alpha[sel] += p_alpha
        g_xy[sel] += p_xy
        g_qa[sel] += p_qa
        g_qb[sel] += p_qb
        g_qc[sel] += p_qc

    # --- chain from screen-space quantities to parameters (per gaussian) ---

    # Q = M^{-1}: full-matrix adjoints, then dM = -Q gQ Q
    gQ = np.empty((V, 2, 2))
    gQ[:, 0, 0] = g_qa
    gQ[:, 0, 1] = 0.5 * g_qb
    gQ[:, 1, 0] = 0.5 * g_qb
    gQ[:, 1, 1] = g_qc
    Q = np.empty((V, 2, 2))
    Q[:, 0, 0] = prep.qa
    Q[:, 0, 1] = prep.qb
    Q[:, 1, 0] = prep.qb
    Q[:, 1, 1] = prep.qc
    gM = -np.einsum("nij,njk,nkl->nil", Q, gQ, Q)

    gSc = np.einsum("nji,njk,nkl->nil", prep.J, gM, prep.J)
    gJ = 2.0 * np.einsum("nij,njk,nkl->nil", gM, prep.J, prep.Sc)

    # J entries depend on Xc = (x, y, z)
    x, y, z = prep.Xc[:, 0], prep.Xc[:, 1], prep.Xc[:, 2]
    gXc = np.zeros((V, 3))
    gXc[:, 0] += gJ[:, 0, 2] * (-K.fx / z**2)
    gXc[:, 1] += gJ[:, 1, 2] * (-K.fy / z**2)
    gXc[:, 2] += (gJ[:, 0, 0] * (-K.fx / z**2)
                  + gJ[:, 1, 1] * (-K.fy / z**2)
                  + gJ[:, 0, 2] * (2.0 * K.fx * x / z**3)
                  + gJ[:, 1, 2] * (2.0 * K.fy * y / z**3))
    # screen center path: d(xy)/dXc is exactly J
    gXc += np.einsum("nji,nj->ni", prep.J, g_xy)
    # composited depth path
    gXc[:, 2] += g_zlin

    # camera-frame covariance: world-cov conjugation and rotation tangent
    R = prep.R
    gSigma3 = np.einsum("ji,njk,kl->nil", R, gSc, R)
    Ccomm = np.einsum("nij,njk->nik", prep.Sc, gSc) - \
        np.einsum("nij,njk->nik", gSc, prep.Sc)
    rot_cov = np.stack([2.0 * Ccomm[:, 1, 2],
                        -2.0 * Ccomm[:, 0, 2],
                        2.0 * Ccomm[:, 0, 1]], axis=1)

    # world covariance = Rot(q) diag(s^2) Rot(q)^T
    qn = scene.q[prep.order]
    norm = np.linalg.norm(qn, axis=1, keepdims=True)
    qh = qn / norm
    w_, x_, y_, z_ = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    Rot = np.empty((V, 3, 3))
    Rot[:, 0, 0] = 1 - 2 * (y_ * y_ + z_ * z_)
    Rot[:, 0, 1] = 2 * (x_ * y_ - w_ * z_)
    Rot[:, 0, 2] = 2 * (x_ * z_ + w_ * y_)
    Rot[:, 1, 0] = 2 * (x_ * y_ + w_ * z_)
    Rot[:, 1, 1] = 1 - 2 * (x_ * x_ + z_ * z_)
    Rot[:, 1, 2] = 2 * (y_ * z_ - w_ * x_)
    Rot[:, 2, 0] = 2 * (x_ * z_ - w_ * y_)
    Rot[:, 2, 1] = 2 * (y_ * z_ + w_ * x_)
    Rot[:, 2, 2] = 1 - 2 * (x_ * x_ + y_ * y_)
    s2 = np.exp(2.0 * scene.s_log[prep.order])

    RtGR = np.einsum("nji,njk,nkl->nil", Rot, gSigma3, Rot)
    g_slog = 2.0 * s2 * np.stack([RtGR[:, 0, 0], RtGR[:, 1, 1], RtGR[:, 2, 2]], axis=1)

    gRot = 2.0 * np.einsum("nij,njk,nk->nik", gSigma3, Rot, s2)

    # dRot/d(unit quaternion), then project through the normalization
    zero = np.zeros(V)
    dR_dw = 2.0 * np.stack([
        np.stack([zero, -z_, y_], 1),
        np.stack([z_, zero, -x_], 1),
        np.stack([-y_, x_, zero], 1)], axis=1)
    dR_dx = 2.0 * np.stack([
        np.stack([zero, y_, z_], 1),
        np.stack([y_, -2 * x_, -w_], 1),
        np.stack([z_, w_, -2 * x_], 1)], axis=1)
    dR_dy = 2.0 * np.stack([
        np.stack([-2 * y_, x_, w_], 1),
        np.stack([x_, zero, z_], 1),
        np.stack([-w_, z_, -2 * y_], 1)], axis=1)
    dR_dz = 2.0 * np.stack([
        np.stack([-2 * z_, -w_, x_], 1),
        np.stack([w_, -2 * z_, y_], 1),
        np.stack([x_, y_, zero], 1)], axis=1)
    g_qh = np.stack([np.einsum("nij,nij->n", gRot, d)
                     for d in (dR_dw, dR_dx, dR_dy, dR_dz)], axis=1)
    g_q = (g_qh - qh * np.einsum("ni,ni->n", g_qh, qh)[:, None]) / norm

    # center and camera tangent
    g_mu = gXc @ R
    g_alpha_logit = g_alpha * prep.alpha * (1.0 - prep.alpha)

    cam = np.zeros(6)
    v = prep.Xc - prep.t[None, :]
    cam[:3] = np.cross(v, gXc).sum(axis=0) + rot_cov.sum(axis=0)
    cam[3:] = gXc.sum(axis=0)

    idx = prep.order
    grads.mu[idx] = g_mu
    grads.s_log[idx] = g_slog
    grads.alpha_logit[idx] = g_alpha_logit
    grads.q[idx] = g_q
    grads.color[idx] = g_color
    grads.camera = cam
    return grads

"""Applications over saved reconstructions, plus evaluation metrics.

Tracking, mask propagation, novel views, and point edits all operate on
per-frame scene checkpoints and the recovered trajectory; the metric
helpers (psnr/ssim, pose errors) are plain array-in, scalar-out
functions usable on any data.

A point counts as visible in a frame when its center lands on the image
and the compositing transmittance remaining at its own depth position
is at least VIS_TRANSMITTANCE; fully occluded points drop out of masks
and get visible=False track rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import (Extrinsics, Intrinsics, Trajectory, project_points,
                     quat_mul, rot_to_quat)
from .errors import (DimMismatch, EmptyCluster, LengthMismatch, TooFewPoints,
                     UnknownId)
from .losses import SSIM_C1, SSIM_C2, _blur
from .renderer import TILE, render, render_cached
from .scene import MOVING, STILL, GaussianScene

VIS_TRANSMITTANCE = 0.05
HULL_K = 16
PSNR_CAP = 99.0


# ----------------------------------------------------------- run loading

@dataclass
class RunData:
    """A reconstruction output directory pulled back into memory."""
    scenes: list
    trajectory: Trajectory
    K: Intrinsics
    shape: tuple
    depth_scale: float = 1.0


def load_run(run_dir) -> RunData:
    root = Path(run_dir)
    meta = json.loads((root / "run.json").read_text())
    traj = Trajectory.load(root / "trajectory.txt")
    scenes = [GaussianScene.load(root / f"frame_{t:04d}.gfs")
              for t in range(int(meta["frames"]))]
    K = Intrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"])
    return RunData(scenes, traj, K, (int(meta["height"]), int(meta["width"])),
                   float(meta.get("depth_scale", 1.0)))


# ------------------------------------------------------------ visibility

def point_visibility(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                     H: int, W: int) -> np.ndarray:
    """Transmittance left for each point at its own center pixel.

    Zero for points that project off the image or behind the camera.
    """
    _, cache = render_cached(scene, K, E, H, W)
    prep = cache.prep
    T = np.zeros(len(scene))
    if len(prep.order) == 0:
        return T
    inv = np.full(len(scene), -1)
    inv[prep.order] = np.arange(len(prep.order))
    px = np.round(prep.xy_all[:, 0]).astype(int)
    py = np.round(prep.xy_all[:, 1]).astype(int)
    on = prep.visible & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    n_tx = (W + TILE - 1) // TILE
    for r in np.flatnonzero(on):
        job, entry = cache.tiles[(py[r] // TILE) * n_tx + (px[r] // TILE)]
        if entry is None:
            continue
        sel, T_in = entry[0], entry[5]
        k = np.searchsorted(sel, inv[r])
        if k >= len(sel) or sel[k] != inv[r]:
            continue
        tx0, ty0, tx1, _ = job
        T[r] = T_in[(py[r] - ty0) * (tx1 - tx0) + (px[r] - tx0), k]
    return T


# -------------------------------------------------------------- tracking

@dataclass
class Track:
    id: int
    frames: np.ndarray   # (T,) contiguous from the birth frame
    mu: np.ndarray       # (T, 3) world positions
    uv: np.ndarray       # (T, 2) screen positions, project(mu) exactly
    visible: np.ndarray  # (T,) bool


@dataclass
class TrackSet:
    tracks: list

    def save_csv(self, path) -> None:
        lines = ["id,frame,x,y,z,u,v,visible"]
        for tr in self.tracks:
            for i, f in enumerate(tr.frames):
                lines.append(
                    f"{tr.id},{int(f)},"
                    f"{tr.mu[i, 0]:.9g},{tr.mu[i, 1]:.9g},{tr.mu[i, 2]:.9g},"
                    f"{tr.uv[i, 0]:.9g},{tr.uv[i, 1]:.9g},"
                    f"{int(tr.visible[i])}")
        Path(path).write_text("\n".join(lines) + "\n")


def query_point(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                H: int, W: int, pixel) -> int:
    """Id of the visible point whose projection is nearest the pixel."""
    T = point_visibility(scene, K, E, H, W)
    ok = T >= VIS_TRANSMITTANCE
    if not ok.any():
        raise TooFewPoints("no visible point near the query pixel")
    xy, _, _ = project_points(scene.mu, K, E)
    d2 = np.sum((xy - np.asarray(pixel, dtype=np.float64)) ** 2, axis=1)
    d2[~ok] = np.inf
    return int(scene.ids[np.argmin(d2)])


def extract_tracks(scenes, trajectory: Trajectory, K: Intrinsics, shape,
                   ids=None, pixel=None, frame: int = 0) -> TrackSet:
    """3D + screen-space trajectories for the queried points.

    Query either by explicit ids or by (pixel, frame), which picks the
    nearest visible point.  Track rows span every frame the id exists.
    """
    H, W = shape
    if ids is None:
        if pixel is None:
            raise UnknownId("query needs ids or a pixel")
        ids = [query_point(scenes[frame], K, trajectory.extrinsics(frame),
                           H, W, pixel)]
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
    if len(ids) == 0:
        raise UnknownId("empty id query")

    known = np.zeros(len(ids), dtype=bool)
    frame_rows = []
    for t, sc in enumerate(scenes):
        E = trajectory.extrinsics(t)
        present = np.isin(ids, sc.ids)
        known |= present
        rows = sc.index_of(ids[present])
        xy, _, _ = project_points(sc.mu[rows], K, E)
        T = point_visibility(sc, K, E, H, W)[rows]
        frame_rows.append((present, sc.mu[rows].copy(), xy,
                           T >= VIS_TRANSMITTANCE))
    if not known.all():
        raise UnknownId(f"ids never present: {ids[~known][:5].tolist()}")

    tracks = []
    for j, gid in enumerate(ids):
        fr, mus, uvs, vis = [], [], [], []
        for t, (present, mu, xy, ok) in enumerate(frame_rows):
            if not present[j]:
                continue
            r = int(present[:j].sum())
            fr.append(t)
            mus.append(mu[r])
            uvs.append(xy[r])
            vis.append(ok[r])
        tracks.append(Track(int(gid), np.asarray(fr), np.asarray(mus),
                            np.asarray(uvs), np.asarray(vis)))
    return TrackSet(tracks)


# ------------------------------------------------------ mask propagation

def _segments_cross(p1, p2, p3, p4) -> bool:
    """Proper (interior) crossing test; shared endpoints do not count."""
    def cr(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    d1 = cr(p3, p4, p1)
    d2 = cr(p3, p4, p2)
    d3 = cr(p1, p2, p3)
    d4 = cr(p1, p2, p4)
    return d1 * d2 < 0 and d3 * d4 < 0


def _points_inside(pts, poly, eps=1e-9) -> np.ndarray:
    """Even-odd containment, counting near-boundary points as inside."""
    x, y = pts[:, 0], pts[:, 1]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    inside = np.zeros(len(pts), dtype=bool)
    near = np.zeros(len(pts), dtype=bool)
    for i in range(len(poly)):
        cond = (y0[i] > y) != (y1[i] > y)
        dy = y1[i] - y0[i]
        xi = x0[i] + (y - y0[i]) * (x1[i] - x0[i]) / (dy if dy != 0 else 1.0)
        inside ^= cond & (x < xi)
        ex, ey = x1[i] - x0[i], y1[i] - y0[i]
        L2 = ex * ex + ey * ey
        tt = np.clip(((x - x0[i]) * ex + (y - y0[i]) * ey) / (L2 if L2 > 0 else 1.0), 0, 1)
        near |= (x - (x0[i] + tt * ex)) ** 2 + (y - (y0[i] + tt * ey)) ** 2 <= eps
    return inside | near


def _knn_hull(pts: np.ndarray, k: int):
    """One walk of the k-nearest-neighbor concave hull; None on failure."""
    n = len(pts)
    start = int(np.lexsort((pts[:, 0], pts[:, 1]))[0])
    hull = [start]
    used = np.zeros(n, dtype=bool)
    used[start] = True
    cur = start
    prev_ang = 0.0
    for step in range(2, 2 * n + 4):
        if step == 5:
            used[start] = False
        cand = np.flatnonzero(~used)
        if len(cand) == 0:
            return None
        d2 = np.sum((pts[cand] - pts[cur]) ** 2, axis=1)
        kn = cand[np.argsort(d2, kind="stable")[:k]]
        ang = np.arctan2(pts[kn, 1] - pts[cur, 1], pts[kn, 0] - pts[cur, 0])
        turn = np.mod(prev_ang - ang, 2.0 * np.pi)
        order = kn[np.argsort(-turn, kind="stable")]
        nxt = -1
        for c in order:
            crossing = False
            for j in range(len(hull) - 2):
                if _segments_cross(pts[cur], pts[c],
                                   pts[hull[j]], pts[hull[j + 1]]):
                    crossing = True
                    break
            if not crossing:
                nxt = int(c)
                break
        if nxt < 0:
            return None
        if nxt == start:
            poly = pts[hull]
            others = np.ones(n, dtype=bool)
            others[hull] = False
            if _points_inside(pts[others], poly).all():
                return poly
            return None
        prev_ang = np.arctan2(pts[cur, 1] - pts[nxt, 1],
                              pts[cur, 0] - pts[nxt, 0])
        hull.append(nxt)
        used[nxt] = True
        cur = nxt
    return None


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise in image coords."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    P = pts[order]

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2 and np.cross(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(P)
    upper = half(P[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def concave_hull(points, k: int = HULL_K) -> np.ndarray:
    """Polygon vertices enclosing the points; concave where supported.

    Tries the k-nearest-neighbor hull at k then 2k, falling back to the
    convex hull when the walk cannot close a simple polygon.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        raise TooFewPoints(f"hull needs 3 distinct points, got {len(pts)}")
    for kk in (k, 2 * k):
        kk = max(3, min(kk, len(pts) - 1))
        poly = _knn_hull(pts, kk)
        if poly is not None:
            return poly
    return _convex_hull(pts)


PIXEL_SNAP2 = 0.5  # squared half pixel diagonal


def rasterize_polygon(poly: np.ndarray, H: int, W: int) -> np.ndarray:
    """Even-odd fill of the polygon at integer pixel centers.

    Centers within half a pixel diagonal of the boundary count as
    covered, so every sample that rounds to a pixel keeps that pixel
    when the polygon passes through the sample.
    """
    X, Y = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64))
    flat = np.stack([X.ravel(), Y.ravel()], axis=1)
    return _points_inside(flat, np.asarray(poly, dtype=np.float64),
                          eps=PIXEL_SNAP2).reshape(H, W)


def propagate_mask(scenes, trajectory: Trajectory, K: Intrinsics, shape,
                   initial) -> list:
    """Carry a frame-0 mask through the sequence via the points under it.

    Selects the points visibly inside the initial mask, then per frame
    rasterizes the concave hull of their visible screen positions.
    """
    H, W = shape
    initial = np.asarray(initial, dtype=bool)
    if initial.shape != (H, W):
        raise DimMismatch(f"mask {initial.shape} vs frames {(H, W)}")
    sc0 = scenes[0]
    E0 = trajectory.extrinsics(0)
    T0 = point_visibility(sc0, K, E0, H, W)
    xy0, _, _ = project_points(sc0.mu, K, E0)
    px = np.round(xy0[:, 0]).astype(int)
    py = np.round(xy0[:, 1]).astype(int)
    on = ((T0 >= VIS_TRANSMITTANCE) & (px >= 0) & (px < W)
          & (py >= 0) & (py < H))
    chosen = on.copy()
    chosen[on] = initial[py[on], px[on]]
    ids = sc0.ids[chosen]
    if len(ids) < 3:
        raise TooFewPoints(f"{len(ids)} visible points under the mask")

    masks = []
    for t, sc in enumerate(scenes):
        E = trajectory.extrinsics(t)
        present = np.isin(ids, sc.ids)
        rows = sc.index_of(ids[present])
        T = point_visibility(sc, K, E, H, W)[rows]
        xy, _, _ = project_points(sc.mu[rows], K, E)
        vis = xy[T >= VIS_TRANSMITTANCE]
        if len(vis) < 3:
            raise TooFewPoints(f"frame {t}: {len(vis)} visible mask points")
        masks.append(rasterize_polygon(concave_hull(vis), H, W))
    return masks


# ------------------------------------------------------- views and edits

def render_novel_view(checkpoint, E_new: Extrinsics, K_new: Intrinsics,
                      shape, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render a checkpoint under an arbitrary new camera."""
    scene = (checkpoint if isinstance(checkpoint, GaussianScene)
             else GaussianScene.load(checkpoint))
    H, W = shape
    return render(scene, K_new, E_new, H, W, background=background).color


def _select_rows(scene: GaussianScene, select) -> np.ndarray:
    if isinstance(select, str):
        name = select.lower()
        if name == "all":
            return np.arange(len(scene))
        if name == "still":
            return np.flatnonzero(scene.cluster == STILL)
        if name == "moving":
            return np.flatnonzero(scene.cluster == MOVING)
        raise UnknownId(f"selection {select!r} (use all/still/moving or ids)")
    return scene.index_of(np.asarray(select, dtype=np.uint64))


def edit(scene, select="all", *, translate=None, rotate=None, scale=None,
         color_scale=None, color_shift=None, remove=False,
         add: GaussianScene | None = None) -> GaussianScene:
    """Similarity transform + affine color map on the selected points.

    mu' = scale * R mu + t applied jointly with the matching scale and
    orientation update, so the rendered splats move rigidly.  remove
    drops the selection; add appends a whole point set afterwards.
    Returns a new scene; the input is untouched.
    """
    out = (scene.copy() if isinstance(scene, GaussianScene)
           else GaussianScene.load(scene))
    rows = _select_rows(out, select)
    if add is None and len(rows) == 0:
        raise EmptyCluster("edit selection is empty")
    if remove:
        keep = np.ones(len(out), dtype=bool)
        keep[rows] = False
        out.keep(keep)
    elif len(rows):
        s = 1.0 if scale is None else float(scale)
        if s <= 0.0:
            raise DimMismatch("edit scale must be > 0")
        R = np.eye(3) if rotate is None else np.asarray(rotate, dtype=np.float64)
        t = np.zeros(3) if translate is None else np.asarray(translate, dtype=np.float64)
        out.mu[rows] = s * (out.mu[rows] @ R.T) + t
        if scale is not None:
            out.s_log[rows] += np.log(s)
        if rotate is not None:
            qr = rot_to_quat(R)
            out.q[rows] = quat_mul(qr, out.q[rows].T).T
        if color_scale is not None or color_shift is not None:
            cs = 1.0 if color_scale is None else np.asarray(color_scale, dtype=np.float64)
            co = 0.0 if color_shift is None else np.asarray(color_shift, dtype=np.float64)
            out.color[rows] = np.clip(out.color[rows] * cs + co, 0.0, 1.0)
    if add is not None:
        out.append(add.mu, add.s_log, add.alpha_logit, add.q, add.color,
                   cluster=add.cluster, birth=add.birth)
    return out


# ---------------------------------------------------------------- metrics

def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"psnr shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean of the Gaussian-windowed SSIM map (the training definition)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"ssim shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    m1, m2 = _blur(a), _blur(b)
    r1, r2, rw = _blur(a * a), _blur(b * b), _blur(a * b)
    v1 = r1 - m1 * m1
    v2 = r2 - m2 * m2
    cov = rw - m1 * m2
    S = ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2)) / \
        ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2))
    return float(S.mean())


@dataclass
class PoseErrorReport:
    ate: float               # RMSE over positions after Sim(3) alignment
    rpe_t: np.ndarray        # per consecutive pair, translation norm
    rpe_r: np.ndarray        # per consecutive pair, degrees
    scale: float             # alignment: gt ~ scale * R @ est + t
    rotation: np.ndarray
    translation: np.ndarray


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity transform: dst ~ s * R @ src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - ms, dst - md
    cov = cd.T @ cs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = float((cs ** 2).sum()) / len(src)
    s = float(np.trace(np.diag(D) @ S) / var) if var > 0 else 1.0
    t = md - s * R @ ms
    return s, R, t


def _relative(E0: Extrinsics, E1: Extrinsics) -> Extrinsics:
    return E1.compose(E0.inverse())


def pose_errors(est: Trajectory, gt: Trajectory) -> PoseErrorReport:
    """ATE after Sim(3) alignment plus raw consecutive-pair RPE.

    RPE compares relative pose steps directly (no alignment): the error
    transform D = rel_est o rel_gt^-1 yields the translation norm and
    the geodesic rotation angle per pair.
    """
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} vs {len(gt)} poses")
    fe = [f for f, _ in est.poses]
    fg = [f for f, _ in gt.poses]
    if fe != fg:
        raise LengthMismatch("trajectories cover different frames")

    src = est.positions()
    dst = gt.positions()
    s, R, t = umeyama_alignment(src, dst)
    aligned = src @ (s * R).T + t
    ate = float(np.sqrt(np.mean(np.sum((aligned - dst) ** 2, axis=1))))

    rpe_t, rpe_r = [], []
    for i in range(len(fe) - 1):
        rel_e = _relative(est.extrinsics(fe[i]), est.extrinsics(fe[i + 1]))
        rel_g = _relative(gt.extrinsics(fg[i]), gt.extrinsics(fg[i + 1]))
        D = rel_e.compose(rel_g.inverse())
        rpe_t.append(float(np.linalg.norm(D.t)))
        ang = np.arccos(np.clip((np.trace(D.rotation()) - 1.0) / 2.0, -1.0, 1.0))
        rpe_r.append(float(np.degrees(ang)))
    return PoseErrorReport(ate, np.asarray(rpe_t), np.asarray(rpe_r),
                           s, R, t)

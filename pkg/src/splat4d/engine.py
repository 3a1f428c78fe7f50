"""Per-frame alternating optimization loop.

Frame 0 seeds the point set from the first image and depth prior and
optimizes it in place.  Every later frame runs four stages: movement
clustering, camera-pose optimization against the static part of the
scene, flow-guided relocation of moving points, and point optimization
with scheduled densification.  Adam state is fresh per phase; camera
steps optimize a 6-vector pose increment that is retracted onto the
pose after every iteration.

Cluster discipline: once a point is labeled Still its center is frozen
(bit-identical) through every subsequent update; Moving points carry
the dynamic content.  Colors are frozen after initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocation import densify, init_gaussians, new_content_mask
from .camera import (Extrinsics, Intrinsics, Trajectory, project_points,
                     projection_jacobians, retract, unproject_points)
from .clustering import cluster_frame, previous_moving_mask
from .config import Config
from .errors import Splat4DError
from .losses import LossReport, depth_loss, flow_loss, isotropic_loss, photometric_loss
from .renderer import render, render_backward, render_cached
from .scene import MOVING, STILL, GaussianScene, split_by_mask
from .tensors import bilinear_sample, rng_stream, save_image, save_mask

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
# below this the pose gradient is cancellation residue, not signal;
# Adam would renormalize it into full-size steps away from the optimum
CAM_GRAD_FLOOR = 1e-12


class AdamState:
    """First/second moment slots keyed by parameter name."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.steps = {}

    def extend(self, name: str, n_new: int) -> None:
        """Grow a per-point slot with zero moments for appended points."""
        if name in self.m and n_new > 0:
            pad = lambda a: np.concatenate(
                [a, np.zeros((n_new,) + a.shape[1:], dtype=a.dtype)])
            self.m[name] = pad(self.m[name])
            self.v[name] = pad(self.v[name])


def adam_step(param, grad, state: AdamState, name: str, lr: float,
              active=None) -> np.ndarray:
    """Bias-corrected Adam update, in place.  Rows where `active` is
    False keep both their value and their moments untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if name not in state.m:
        state.m[name] = np.zeros_like(param, dtype=np.float64)
        state.v[name] = np.zeros_like(param, dtype=np.float64)
        state.steps[name] = 0
    state.steps[name] += 1
    t = state.steps[name]
    m, v = state.m[name], state.v[name]
    new_m = BETA1 * m + (1.0 - BETA1) * grad
    new_v = BETA2 * v + (1.0 - BETA2) * grad * grad
    if active is not None:
        keep = np.asarray(active, dtype=bool)
        while keep.ndim < param.ndim:
            keep = keep[..., None]
        new_m = np.where(keep, new_m, m)
        new_v = np.where(keep, new_v, v)
    m[...] = new_m
    v[...] = new_v
    m_hat = m / (1.0 - BETA1 ** t)
    v_hat = v / (1.0 - BETA2 ** t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if active is not None:
        delta = np.where(keep, delta, 0.0)
    param += delta
    return param


@dataclass
class FrameResult:
    frame: int
    extrinsics: Extrinsics
    scene: GaussianScene
    losses: list = field(default_factory=list)
    moving_mask: np.ndarray | None = None
    camera_skipped: bool = False
    cluster_fallback: str | None = None
    densified: int = 0


@dataclass
class _ScreenCache:
    """Per-point screen positions at the end of the previous frame."""
    ids: np.ndarray
    xy: np.ndarray
    ok: np.ndarray

    def lookup(self, scene: GaussianScene):
        """Align cached positions with the current point order; points
        without a cache entry come back not-ok."""
        xy = np.zeros((len(scene), 2))
        ok = np.zeros(len(scene), dtype=bool)
        present = np.isin(self.ids, scene.ids)
        if present.any():
            idx = scene.index_of(self.ids[present])
            xy[idx] = self.xy[present]
            ok[idx] = self.ok[present]
        return xy, ok


def _screen_cache(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                  H: int, W: int) -> _ScreenCache:
    xy, z, in_front = project_points(scene.mu, K, E)
    ok = in_front & (xy[:, 0] > -0.5) & (xy[:, 0] < W - 0.5) \
        & (xy[:, 1] > -0.5) & (xy[:, 1] < H - 0.5)
    xy = np.where(in_front[:, None], xy, -1.0)
    return _ScreenCache(scene.ids.copy(), xy, ok)


def _photo_error_map(pred, target) -> np.ndarray:
    """Per-pixel mean absolute color error, the densification signal."""
    return np.mean(np.abs(np.asarray(pred) - np.asarray(target)), axis=2)


def _report(frame, phase, step, cfg, mse, dssim, dep, flo, iso, a, b) -> LossReport:
    total = (cfg.lambda_p * (mse + dssim) + cfg.lambda_d * dep
             + cfg.lambda_f * flo + cfg.lambda_i * iso)
    return LossReport(total, mse, dssim, dep, flo, iso, a, b)


def _optimize_points(scene, img, depth_prior, K, E, cfg, *, frame, iters,
                     densify_steps, flow_field=None, cache=None,
                     moving_mask=None, newcontent=None, freeze_still=False,
                     rows=None) -> int:
    """Shared iteration loop for frame-0 and per-frame point phases.
    Returns the number of densified points."""
    H, W = img.shape[:2]
    state = AdamState()
    added = 0
    if cache is not None:
        prev_xy, prev_ok = cache.lookup(scene)

    for i in range(1, iters + 1):
        if newcontent is not None and i == 1 and newcontent.any():
            rng = rng_stream(cfg.seed, f"densify-new-{frame}")
            k = densify(scene, img, depth_prior, K, E, cfg.n_ini, rng,
                        newcontent, error_map=None, scale_gain=cfg.scale_gain,
                        opacity=cfg.opacity_init, moving_mask=moving_mask,
                        birth=frame)
            added += k
            for name in ("mu", "s_log", "alpha_logit", "q"):
                state.extend(name, k)
            if cache is not None:
                prev_xy, prev_ok = cache.lookup(scene)
        if i in densify_steps:
            out = render(scene, K, E, H, W, background=cfg.background)
            err = _photo_error_map(out.color, img)
            mask = err > cfg.err_threshold
            if mask.any():
                rng = rng_stream(cfg.seed, f"densify-{frame}-{i}")
                k = densify(scene, img, depth_prior, K, E, cfg.n_ini, rng,
                            mask, error_map=err, scale_gain=cfg.scale_gain,
                            opacity=cfg.opacity_init, moving_mask=moving_mask,
                            birth=frame)
                added += k
                for name in ("mu", "s_log", "alpha_logit", "q"):
                    state.extend(name, k)
                if cache is not None:
                    prev_xy, prev_ok = cache.lookup(scene)

        out, fwd_cache = render_cached(scene, K, E, H, W, background=cfg.background)
        mse, dssim, adj_color = photometric_loss(out.color, img)

        if moving_mask is not None:
            depth_region = moving_mask & (out.acc_alpha > cfg.depth_coverage)
        else:
            depth_region = out.acc_alpha > cfg.depth_coverage
        dep = a = b = 0.0
        adj_depth = None
        if depth_region.any():
            dep, a, b, adj_depth = depth_loss(out.depth, depth_prior, depth_region)

        flo = 0.0
        d_curr = None
        if flow_field is not None and cache is not None:
            select = (scene.cluster == MOVING) & prev_ok & out.point_visible
            if select.any():
                flo, d_curr, _ = flow_loss(out.point_xy, prev_xy,
                                           flow_field, select)

        iso, d_slog_iso = isotropic_loss(scene)

        grads = render_backward(
            scene, K, E,
            cfg.lambda_p * adj_color,
            None if adj_depth is None else cfg.lambda_d * adj_depth,
            background=cfg.background, cache=fwd_cache)

        g_mu = grads.mu
        g_slog = grads.s_log + cfg.lambda_i * d_slog_iso
        g_alpha = grads.alpha_logit
        g_q = grads.q
        if d_curr is not None:
            d_mu_proj, _, _ = projection_jacobians(scene.mu, K, E)
            g_mu = g_mu + cfg.lambda_f * np.einsum("ni,nij->nj", d_curr, d_mu_proj)

        mu_active = None
        if freeze_still:
            mu_active = scene.cluster != STILL
        adam_step(scene.mu, g_mu, state, "mu", cfg.lr_gauss, active=mu_active)
        adam_step(scene.s_log, g_slog, state, "s_log", cfg.lr_gauss)
        adam_step(scene.alpha_logit, g_alpha, state, "alpha_logit", cfg.lr_gauss)
        adam_step(scene.q, g_q, state, "q", cfg.lr_gauss)

        if rows is not None:
            phase = "first" if moving_mask is None else "points"
            rows.append((frame, phase, i,
                         _report(frame, phase, i, cfg, mse, dssim, dep, flo, iso, a, b)))
    return added


def optimize_first_frame(img, depth, flow, K: Intrinsics, cfg: Config,
                         rows=None) -> FrameResult:
    """Initialize the point set from the first frame and optimize it.

    The flow argument is accepted for signature parity and unused: the
    first frame has no predecessor.  Colors are sampled from the image
    at initialization and never optimized afterwards."""
    E = Extrinsics.identity()
    rng = rng_stream(cfg.seed, "init")
    scene = init_gaussians(img, depth, K, E, cfg.n_ini, rng,
                           scale_gain=cfg.scale_gain, opacity=cfg.opacity_init)
    added = _optimize_points(scene, img, depth, K, E, cfg, frame=0,
                             iters=cfg.iters_first,
                             densify_steps=cfg.densify_steps_first, rows=rows)
    return FrameResult(0, E, scene, moving_mask=None, densified=added)


def optimize_camera(scene, img, depth_prior, flow_field, K: Intrinsics,
                    E_init: Extrinsics, cfg: Config, moving_mask,
                    cache: _ScreenCache, frame: int, rows=None):
    """Pose-only optimization against the static scene content.

    Pixels under the union of the current movement mask and the
    rendered footprint of previously-Moving points are excluded from
    the dense losses; the flow term uses Still points only.  Returns
    (pose, skipped): when every pixel is excluded there is no data and
    the initial pose is returned with skipped=True."""
    H, W = img.shape[:2]
    E = E_init.copy()
    state = AdamState()
    prev_xy, prev_ok = cache.lookup(scene)
    still = scene.cluster == STILL

    for i in range(1, cfg.iters_cam + 1):
        m_bar = moving_mask | previous_moving_mask(scene, K, E, H, W)
        if m_bar.all():
            return E_init.copy(), True

        out, fwd_cache = render_cached(scene, K, E, H, W, background=cfg.background)
        mse, dssim, adj_color = photometric_loss(out.color, img, exclude=m_bar)

        depth_region = ~m_bar & (out.acc_alpha > cfg.depth_coverage)
        dep = a = b = 0.0
        adj_depth = None
        if depth_region.any():
            dep, a, b, adj_depth = depth_loss(out.depth, depth_prior, depth_region)

        flo = 0.0
        d_curr = None
        select = still & prev_ok & out.point_visible
        if flow_field is not None and select.any():
            flo, d_curr, _ = flow_loss(out.point_xy, prev_xy, flow_field, select)

        grads = render_backward(
            scene, K, E,
            cfg.lambda_p * adj_color,
            None if adj_depth is None else cfg.lambda_d * adj_depth,
            background=cfg.background, cache=fwd_cache)
        g_cam = grads.camera.copy()
        if d_curr is not None:
            _, d_tan, _ = projection_jacobians(scene.mu, K, E)
            g_cam += cfg.lambda_f * np.einsum("ni,nij->j", d_curr, d_tan)
        if np.linalg.norm(g_cam) < CAM_GRAD_FLOOR:
            break

        delta = np.zeros(6)
        adam_step(delta, g_cam, state, "cam", cfg.lr_cam)
        E = retract(E, delta)

        if rows is not None:
            rows.append((frame, "camera", i,
                         _report(frame, "camera", i, cfg, mse, dssim, dep, flo, 0.0, a, b)))
    return E, False


def relocate_moving(scene: GaussianScene, flow_field, depth_map,
                    K: Intrinsics, E: Extrinsics, cache: _ScreenCache) -> int:
    """Advect Moving points by flow and re-anchor them on the current
    depth prior.  Points that advect off the image or onto invalid
    depth keep their previous center.  Returns the count moved."""
    moving = scene.cluster == MOVING
    if not moving.any():
        return 0
    prev_xy, prev_ok = cache.lookup(scene)
    cand = moving & prev_ok
    if not cand.any():
        return 0
    fl, inside = bilinear_sample(flow_field, prev_xy[cand])
    new_xy = prev_xy[cand] + fl
    d, d_inside = bilinear_sample(depth_map, new_xy)
    h, w = np.asarray(depth_map).shape[:2]
    good = (inside & d_inside & (d > 0.0)
            & (new_xy[:, 0] > -0.5) & (new_xy[:, 0] < w - 0.5)
            & (new_xy[:, 1] > -0.5) & (new_xy[:, 1] < h - 0.5))
    if not good.any():
        return 0
    idx = np.flatnonzero(cand)[good]
    scene.mu[idx] = unproject_points(new_xy[good], d[good], K, E)
    return int(good.sum())


def optimize_gaussians(scene, img, depth_prior, flow_field, K: Intrinsics,
                       E: Extrinsics, cfg: Config, moving_mask, newcontent,
                       cache: _ScreenCache, frame: int, rows=None) -> int:
    """Point optimization for one frame: photometric and isotropy terms
    over everything, depth over the moving region, flow over Moving
    points; Still centers frozen.  Returns the densified count."""
    return _optimize_points(scene, img, depth_prior, K, E, cfg, frame=frame,
                            iters=cfg.iters_gauss,
                            densify_steps=cfg.densify_steps,
                            flow_field=flow_field, cache=cache,
                            moving_mask=moving_mask, newcontent=newcontent,
                            freeze_still=True, rows=rows)


def run(seq, cfg: Config, out_dir=None):
    """Reconstruct a full sequence.

    Returns (trajectory, frame results).  When out_dir is given, writes
    trajectory.txt, per-frame checkpoints frame_%04d.gfs, losses.csv,
    and optional debug renders."""
    H, W = seq.shape
    K = seq.K
    n = seq.n_frames
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        meta = {"frames": n, "height": H, "width": W,
                "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                "depth_scale": seq.depth_scale}
        (out / "run.json").write_text(json.dumps(meta, indent=1) + "\n")
    rows: list = []
    results: list[FrameResult] = []

    def _checkpoint(t, res):
        if out is None:
            return
        res.scene.save(out / f"frame_{t:04d}.gfs")
        if cfg.save_debug:
            dbg = out / "debug"
            dbg.mkdir(exist_ok=True)
            shot = render(res.scene, K, res.extrinsics, H, W,
                          background=cfg.background)
            save_image(dbg / f"render_{t:04d}.png", shot.color)
            if res.moving_mask is not None:
                save_mask(dbg / f"moving_{t:04d}.png", res.moving_mask)

    try:
        res = optimize_first_frame(seq.images[0], seq.depths[0], None, K,
                                   cfg, rows=rows)
    except Splat4DError as e:
        raise type(e)(f"frame 0: {e}") from e
    scene = res.scene
    poses = [res.extrinsics]
    # detach the stored result from the live scene, like later frames
    res = FrameResult(0, res.extrinsics, scene.copy(),
                      densified=res.densified)
    results.append(res)
    _checkpoint(0, res)
    cache = _screen_cache(scene, K, poses[0], H, W)

    for t in range(1, n):
        try:
            clu = cluster_frame(seq.flow_bwd[t], seq.flow_fwd[t - 1], K,
                                cfg.epipolar_threshold)
            E_init = poses[t - 1].copy()
            if cfg.constant_velocity and t >= 2:
                step = poses[t - 1].compose(poses[t - 2].inverse())
                E_init = step.compose(poses[t - 1])
            E_t, skipped = optimize_camera(
                scene, seq.images[t], seq.depths[t], seq.flow_fwd[t - 1], K,
                E_init, cfg, clu.mask, cache, t, rows=rows)

            relocate_moving(scene, seq.flow_fwd[t - 1], seq.depths[t], K,
                            E_t, cache)

            xy, _, in_front = project_points(scene.mu, K, E_t)
            xy = np.where(in_front[:, None], xy, -1.0)
            moving_ids, _ = split_by_mask(scene, clu.mask, xy)
            scene.cluster[:] = STILL
            if len(moving_ids):
                scene.cluster[scene.index_of(moving_ids)] = MOVING

            newcontent = new_content_mask(seq.flow_bwd[t],
                                          seq.flow_fwd[t - 1],
                                          cfg.fb_threshold)
            added = optimize_gaussians(
                scene, seq.images[t], seq.depths[t], seq.flow_fwd[t - 1], K,
                E_t, cfg, clu.mask, newcontent, cache, t, rows=rows)

            if cfg.prune_floor > 0.0:
                scene.keep(scene.alphas() >= cfg.prune_floor)

            poses.append(E_t)
            res = FrameResult(t, E_t, scene.copy(), moving_mask=clu.mask,
                              camera_skipped=skipped,
                              cluster_fallback=clu.fallback, densified=added)
            results.append(res)
            _checkpoint(t, res)
            cache = _screen_cache(scene, K, E_t, H, W)
        except Splat4DError as e:
            raise type(e)(f"frame {t}: {e}") from e

    traj = Trajectory(list(enumerate(poses)))
    if out is not None:
        traj.save(out / "trajectory.txt")
        lines = [LossReport.CSV_HEADER]
        lines += [rep.csv_row(f, ph, i) for (f, ph, i, rep) in rows]
        (out / "losses.csv").write_text("\n".join(lines) + "\n")
    for res in results:
        res.losses = [rep for (f, ph, i, rep) in rows if f == res.frame]
    return traj, results

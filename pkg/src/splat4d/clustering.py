"""Still/Moving separation from optical flow via two-view geometry.

Flow correspondences from the static part of a scene satisfy the
epipolar constraint of the camera motion; pixels on independently
moving objects violate it.  A fundamental matrix is fit robustly to
flow correspondences in normalized (intrinsics-removed) coordinates,
and the per-pixel first-order geometric (Sampson) distance is
thresholded into the frame's movement mask.

Degenerate frames (no parallax, unreliable fit) fall back to an
all-Still mask: without usable two-view geometry the frame is treated
as static rather than split arbitrarily.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_closing, binary_opening

from .camera import Extrinsics, Intrinsics
from .errors import DegenerateConfiguration
from .renderer import render
from .scene import MOVING, GaussianScene
from .tensors import bilinear_sample

CORR_STRIDE = 8
IRLS_ROUNDS = 5
MIN_FLOW_PX = 0.3          # below this median flow the frame is static
RESIDUAL_FACTOR = 10.0     # inlier residual ceiling, in thresholds
RANSAC_ITERS = 64
RANSAC_SAMPLE = 12         # subset size; > 8 conditions near-planar draws
RANSAC_TRIM = 0.8          # fraction of residuals kept by the trimmed score
RANSAC_SEED = 1234         # fixed: the fit must not depend on run state


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, T


def _rank2(F):
    U, S, Vt = np.linalg.svd(F)
    S = S.copy()
    S[2] = 0.0
    return U @ np.diag(S) @ Vt


def _sampson_sq(F, x1, x2):
    """Squared Sampson error of x2^T F x1 = 0 for inhomogeneous (N, 2)."""
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    e = np.einsum("ni,ni->n", h2, Fx1)
    denom = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return e * e / np.maximum(denom, 1e-18)


def sampson_distance(F, x1, x2):
    """First-order geometric distance to the epipolar constraint."""
    return np.sqrt(_sampson_sq(F, x1, x2))


def estimate_fundamental(x1, x2, inlier_threshold: float | None = None) -> np.ndarray:
    """Normalized 8-point fit of F (with x2^T F x1 = 0), rank-2 enforced,
    refined by IRLS reweighting on the Sampson error.  The result has
    unit Frobenius norm and zero smallest singular value.

    With an inlier threshold, random subsets are scored first by the
    trimmed mean of squared Sampson distances (smallest 80%) and the
    IRLS refinement runs on the winner's consensus set.  Plain IRLS
    from the full set can settle on a compromise between camera motion
    and an independently moving object; the trimmed score cannot, as
    long as moving points stay under a fifth of the correspondences.
    Subsets are larger than minimal because a scene dominated by one
    plane makes exact 8-point draws ill-conditioned."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    if len(x1) < 8 or len(x1) != len(x2):
        raise DegenerateConfiguration(
            f"need >= 8 correspondences, got {len(x1)}/{len(x2)}")
    n1, T1 = _hartley(x1)
    n2, T2 = _hartley(x2)

    A0 = np.column_stack([
        n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
        n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
        n1[:, 0], n1[:, 1], np.ones(len(n1)),
    ])

    def solve(A):
        _, S, Vt = np.linalg.svd(A, full_matrices=False)
        if S[0] <= 0 or S[min(7, len(S) - 1)] / S[0] < 1e-12:
            raise DegenerateConfiguration("rank-deficient correspondence set")
        return _rank2(Vt[-1].reshape(3, 3))

    def denorm(Fn):
        F = _rank2(T2.T @ Fn @ T1)
        return F / np.linalg.norm(F)

    support = np.ones(len(n1))
    if inlier_threshold is not None and len(x1) > RANSAC_SAMPLE:
        rng = np.random.default_rng(RANSAC_SEED)
        kept = max(8, int(np.ceil(RANSAC_TRIM * len(x1))))
        best_score = np.inf
        best_sq = None
        for _ in range(RANSAC_ITERS):
            sub = rng.choice(len(x1), size=RANSAC_SAMPLE, replace=False)
            try:
                Fc = denorm(solve(A0[sub]))
            except DegenerateConfiguration:
                continue
            sq = _sampson_sq(Fc, x1, x2)
            score = float(np.sort(sq)[:kept].mean())
            if score < best_score:
                best_score, best_sq = score, sq
        if best_sq is not None:
            inl = best_sq < inlier_threshold ** 2
            if inl.sum() >= 8:
                support = inl.astype(np.float64)

    w = support.copy()
    Fn = solve(A0 * w[:, None])
    for _ in range(IRLS_ROUNDS):
        r = _sampson_sq(Fn, n1, n2)
        w = support / np.sqrt(np.maximum(r, 1e-12))
        Fn = solve(A0 * w[:, None])

    return denorm(Fn)


def normalize_points(pts, K: Intrinsics) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[..., 0] - K.cx) / K.fx,
                     (pts[..., 1] - K.cy) / K.fy], axis=-1)


def flow_correspondences(flow, flow_reverse, stride: int = CORR_STRIDE):
    """Grid-sampled flow correspondences, best half by round-trip error.

    Returns (p, q, all_p, consistency): start pixels p, advected end
    points q = p + flow(p), plus the full grid and per-sample round-trip
    error before selection.
    """
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[stride // 2:h:stride, stride // 2:w:stride]
    p = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    f = flow[p[:, 1].astype(int), p[:, 0].astype(int)]
    q = p + f
    back, inside = bilinear_sample(flow_reverse, q)
    err = np.linalg.norm(f + back, axis=1)
    err[~inside] = np.inf
    order = np.argsort(err, kind="stable")
    keep = order[: max(len(order) // 2, 1)]
    keep = keep[np.isfinite(err[keep])]
    return p[keep], q[keep], p, err


def epipolar_error_map(flow, F, K: Intrinsics) -> np.ndarray:
    """Per-pixel Sampson distance of (p, p + flow(p)) under F, computed
    in normalized image coordinates (resolution independent)."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    p = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    q = p + flow.reshape(-1, 2)
    d = sampson_distance(F, normalize_points(p, K), normalize_points(q, K))
    return d.reshape(h, w)


def movement_mask(err_map, threshold: float) -> np.ndarray:
    """Threshold the error map, then despeckle with a 3x3 open + close."""
    raw = np.asarray(err_map) > threshold
    s = np.ones((3, 3), dtype=bool)
    return binary_closing(binary_opening(raw, structure=s), structure=s)


@dataclass
class ClusterResult:
    mask: np.ndarray            # (H, W) bool, True = Moving
    fundamental: np.ndarray | None
    err_map: np.ndarray | None
    fallback: str | None        # reason when the frame was declared Still


def cluster_frame(flow_back, flow_fwd_prev, K: Intrinsics,
                  threshold: float) -> ClusterResult:
    """Movement mask for frame t from its backward flow (t -> t-1) and
    the previous frame's forward flow (used for the round-trip check)."""
    flow_back = np.asarray(flow_back, dtype=np.float64)
    h, w = flow_back.shape[:2]
    still = np.zeros((h, w), dtype=bool)

    p, q, _, _ = flow_correspondences(flow_back, flow_fwd_prev)
    if len(p) < 8:
        return ClusterResult(still, None, None, "too few correspondences")
    median_flow = float(np.median(np.linalg.norm(q - p, axis=1)))
    if median_flow < MIN_FLOW_PX:
        return ClusterResult(still, None, None, "no camera parallax")
    try:
        F = estimate_fundamental(normalize_points(p, K), normalize_points(q, K),
                                 inlier_threshold=threshold)
    except DegenerateConfiguration:
        return ClusterResult(still, None, None, "degenerate correspondences")
    inlier_resid = float(np.median(
        sampson_distance(F, normalize_points(p, K), normalize_points(q, K))))
    if inlier_resid > RESIDUAL_FACTOR * threshold:
        return ClusterResult(still, None, None, "unreliable epipolar fit")
    err = epipolar_error_map(flow_back, F, K)
    return ClusterResult(movement_mask(err, threshold), F, err, None)


def previous_moving_mask(scene: GaussianScene, K: Intrinsics, E: Extrinsics,
                         H: int, W: int) -> np.ndarray:
    """Screen footprint of the current Moving cluster: render only those
    points on black and keep every pixel with nonzero grayscale."""
    moving = scene.cluster == MOVING
    if not moving.any():
        return np.zeros((H, W), dtype=bool)
    sub = GaussianScene(scene.mu[moving], scene.s_log[moving],
                        scene.alpha_logit[moving], scene.q[moving],
                        scene.color[moving], ids=scene.ids[moving])
    out = render(sub, K, E, H, W, background=(0.0, 0.0, 0.0))
    gray = out.color @ np.array([0.299, 0.587, 0.114])
    return gray > 0.0

"""Prior-driven point allocation: where to create Gaussians and how.

Initialization samples pixels proportionally to local image texture
(Sobel gradient magnitude normalized to a probability map), lifts them
through the depth prior, and copies appearance from the image.
Densification reuses the same recipe on a restricted support: either a
new-content mask with uniform probability, or a thresholded photometric
error map.  The number of densified points is proportional to the mask
area, n_new = round(mask_ratio * n_ini).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import sobel

from .camera import Extrinsics, Intrinsics, unproject_points
from .errors import EmptySupport
from .scene import MOVING, STILL, GaussianScene, encode_alpha
from .tensors import bilinear_sample

ODDS_MIN = 1e-4
ODDS_MAX = 1e2


@dataclass
class SamplingMap:
    prob: np.ndarray     # (H, W), zero outside support, sums to 1
    support: np.ndarray  # (H, W) bool


def grayscale(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ np.array([0.299, 0.587, 0.114])


def texture_prob_map(img) -> SamplingMap:
    """Sobel gradient magnitude normalized over its nonzero entries.
    A constant image (no gradient anywhere) falls back to uniform."""
    g = grayscale(img)
    gx = sobel(g, axis=1)
    gy = sobel(g, axis=0)
    t = np.sqrt(gx * gx + gy * gy)
    total = t.sum()
    if total <= 0.0:
        h, w = g.shape
        return SamplingMap(np.full((h, w), 1.0 / (h * w)),
                           np.ones((h, w), dtype=bool))
    return SamplingMap(t / total, t > 0)


def masked_prob_map(weights, mask) -> SamplingMap:
    """Probability map restricted to a mask; zero/absent weights inside
    the mask fall back to uniform over the mask."""
    mask = np.asarray(mask, dtype=bool)
    if weights is None:
        w = mask.astype(np.float64)
    else:
        w = np.where(mask, np.maximum(np.asarray(weights, dtype=np.float64), 0.0), 0.0)
        if w.sum() <= 0.0:
            w = mask.astype(np.float64)
    total = w.sum()
    if total <= 0.0:
        return SamplingMap(np.zeros(mask.shape), np.zeros(mask.shape, dtype=bool))
    return SamplingMap(w / total, w > 0)


def sample_points(smap: SamplingMap, n: int, rng) -> np.ndarray:
    """Draw n pixel coordinates (x, y) i.i.d. from the map."""
    if not smap.support.any():
        raise EmptySupport("sampling map has empty support")
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    h, w = smap.prob.shape
    flat = rng.choice(h * w, size=n, replace=True, p=smap.prob.ravel())
    ys, xs = np.divmod(flat, w)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def _materialize(scene, img, depth, K, E, pts, texture, scale_gain,
                 opacity, rng, moving_mask, birth):
    """Create points at integer pixels pts: color copied from the image,
    center unprojected through the depth prior, isotropic scale from the
    odds of the texture probability at the pixel (scaled by depth and
    focal so the screen footprint is probability-controlled), random
    unit rotation."""
    xs, ys = pts[:, 0], pts[:, 1]
    d = np.asarray(depth, dtype=np.float64)[ys, xs]
    mu = unproject_points(pts.astype(np.float64), d, K, E)
    color = np.asarray(img, dtype=np.float64)[ys, xs]
    p = texture.prob[ys, xs]
    odds = np.clip(p / np.maximum(1.0 - p, 1e-12), ODDS_MIN, ODDS_MAX)
    s = odds * d * scale_gain / K.fx
    s_log = np.log(np.stack([s, s, s], axis=1))
    q = rng.normal(size=(len(pts), 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    alpha_logit = np.full(len(pts), encode_alpha(opacity))
    if moving_mask is not None:
        cluster = np.where(np.asarray(moving_mask, dtype=bool)[ys, xs],
                           MOVING, STILL).astype(np.uint8)
    else:
        cluster = np.full(len(pts), STILL, dtype=np.uint8)
    return scene.append(mu, s_log, alpha_logit, q, color, cluster, birth)


def init_gaussians(img, depth, K: Intrinsics, E: Extrinsics, n: int, rng,
                   scale_gain: float, opacity: float = 0.99,
                   moving_mask=None, birth: int = 0) -> GaussianScene:
    """Fresh point set sampled from the image's texture probability map."""
    scene = GaussianScene.empty()
    texture = texture_prob_map(img)
    pts = sample_points(texture, n, rng)
    if n:
        _materialize(scene, img, depth, K, E, pts, texture, scale_gain,
                     opacity, rng, moving_mask, birth)
    return scene


def new_content_mask(flow_fwd, flow_bwd, fb_threshold: float) -> np.ndarray:
    """Pixels whose forward-backward flow round trip is inconsistent.

    A pixel p is flagged when |F_fwd(p) + F_bwd(p + F_fwd(p))| exceeds
    the threshold, or when the round trip leaves the image entirely.
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    h, w = flow_fwd.shape[:2]
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    p = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    q = p + flow_fwd.reshape(-1, 2)
    back, inside = bilinear_sample(flow_bwd, q)
    err = np.linalg.norm(flow_fwd.reshape(-1, 2) + back, axis=1)
    flagged = (err > fb_threshold) | ~inside
    return flagged.reshape(h, w)


def densify(scene: GaussianScene, img, depth, K: Intrinsics, E: Extrinsics,
            n_ini: int, rng, mask, error_map=None,
            scale_gain: float = 1.0, opacity: float = 0.99,
            moving_mask=None, birth: int = 0) -> int:
    """Append round(mask_ratio * n_ini) points sampled on mask support.

    With error_map given, sampling follows the masked error map
    (uniform otherwise).  Existing points are never touched.  Returns
    the number of appended points.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ratio = mask.sum() / (h * w)
    n_new = int(round(ratio * n_ini))
    if n_new == 0:
        return 0
    smap = masked_prob_map(error_map, mask)
    pts = sample_points(smap, n_new, rng)
    texture = texture_prob_map(img)
    _materialize(scene, img, depth, K, E, pts, texture, scale_gain,
                 opacity, rng, moving_mask, birth)
    return n_new

"""The four optimization losses and their analytic adjoints.

All losses are pure functions returning both a scalar and the gradient
the caller needs: per-pixel adjoints for the rendered color/depth (fed
into the renderer backward pass), per-point adjoints for screen
positions (flow) and log-scales (isotropy).

Pixel exclusion uses a replacement scheme: excluded predicted pixels
are substituted by the target before evaluation, which zeroes both
their residual and their adjoint while keeping structural (windowed)
terms well defined across the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import AllPixelsExcluded, EmptyCluster, EmptyRegion
from .scene import GaussianScene
from .tensors import bilinear_sample

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5
SSIM_WIN = 11


@dataclass
class LossReport:
    """Per-iteration loss breakdown; weighted total plus raw terms."""
    total: float = 0.0
    pho_mse: float = 0.0
    pho_ssim: float = 0.0
    dep: float = 0.0
    flo: float = 0.0
    iso: float = 0.0
    a: float = 1.0
    b: float = 0.0

    CSV_HEADER = "frame,phase,iter,total,pho_mse,pho_ssim,dep,flo,iso,a,b"

    def csv_row(self, frame, phase, step) -> str:
        return (f"{frame},{phase},{step},{self.total:.8g},{self.pho_mse:.8g},"
                f"{self.pho_ssim:.8g},{self.dep:.8g},{self.flo:.8g},"
                f"{self.iso:.8g},{self.a:.8g},{self.b:.8g}")


def _gauss_kernel():
    r = SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()

_KERNEL = _gauss_kernel()


def _blur(img):
    """Separable Gaussian window, zero-padded.  The kernel is symmetric
    and the padding linear, so this operator is its own adjoint."""
    out = convolve1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def photometric_loss(pred, target, exclude=None, ssim_weight=1.0):
    """MSE + weighted (1 - SSIM), means taken over non-excluded pixels.

    Returns (mse, dssim, adjoint) with adjoint = d(mse + w*dssim)/d(pred),
    zero at excluded pixels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    h, w = pred.shape[:2]
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool)
    else:
        keep = np.ones((h, w), dtype=bool)
    m = int(keep.sum())
    if m == 0:
        raise AllPixelsExcluded("photometric loss over an empty pixel set")

    x = np.where(keep[..., None], pred, target)
    y = target
    diff = x - y
    mse = float((diff ** 2).sum() / (3 * m))
    adj = 2.0 * diff / (3 * m)

    # SSIM from five blurred moment maps
    m1 = _blur(x)
    m2 = _blur(y)
    r1 = _blur(x * x)
    r2 = _blur(y * y)
    rw = _blur(x * y)
    v1 = r1 - m1 * m1
    v2 = r2 - m2 * m2
    cov = rw - m1 * m2
    n1 = 2.0 * m1 * m2 + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = m1 * m1 + m2 * m2 + SSIM_C1
    d2 = v1 + v2 + SSIM_C2
    S = (n1 * n2) / (d1 * d2)
    dssim = float((1.0 - S[keep]).sum() / (3 * m))

    # adjoints of S w.r.t. the blurred moments, then pull back through
    # the (self-adjoint) window
    g = np.where(keep[..., None], -ssim_weight / (3 * m), 0.0)
    dS_dm1 = (2.0 * m2 * (n2 - n1) / (d1 * d2)
              - 2.0 * m1 * S * (1.0 / d1 - 1.0 / d2))
    dS_dr1 = -S / d2
    dS_dw = 2.0 * n1 / (d1 * d2)
    adj_ssim = (_blur(g * dS_dm1)
                + 2.0 * x * _blur(g * dS_dr1)
                + y * _blur(g * dS_dw))
    adj = adj + adj_ssim
    adj *= keep[..., None]
    return mse, dssim, adj


def depth_loss(pred, prior, region):
    """Affine-aligned L1 depth loss over a pixel region.

    The scale/shift (a, b) minimizing the L2 alignment over the region
    is solved in closed form each call; the reported loss is the mean
    absolute aligned residual and the adjoint treats (a, b) as fixed.
    Returns (loss, a, b, adjoint).
    """
    pred = np.asarray(pred, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    m = int(region.sum())
    if m == 0:
        raise EmptyRegion("depth loss over an empty region")
    x = pred[region]
    y = prior[region]
    mx = x.mean()
    var = ((x - mx) ** 2).mean()
    if var < 1e-12:
        a, b = 1.0, float((y - x).mean())
    else:
        a = float(((x - mx) * (y - y.mean())).mean() / var)
        b = float(y.mean() - a * mx)
    r = a * x + b - y
    loss = float(np.abs(r).mean())
    adj = np.zeros_like(pred)
    adj[region] = a * np.sign(r) / m
    return loss, a, b, adj


def flow_loss(curr_pos, prev_pos, flow_prev, select):
    """Sparse screen-motion loss over a point subset.

    For each selected point the target position is prev_pos advected by
    the flow field sampled at prev_pos; the loss is the mean over points
    of half the squared residual norm.  Points whose prev_pos falls
    outside the flow grid are skipped.  Returns (loss, d_curr, used)
    where d_curr is the (N, 2) adjoint of curr_pos and used the mask of
    points that entered the mean.
    """
    curr_pos = np.asarray(curr_pos, dtype=np.float64)
    prev_pos = np.asarray(prev_pos, dtype=np.float64)
    select = np.asarray(select, dtype=bool)
    if not select.any():
        raise EmptyCluster("flow loss over an empty point set")
    fl, inside = bilinear_sample(flow_prev, prev_pos)
    used = select & inside
    k = int(used.sum())
    if k == 0:
        raise EmptyCluster("flow loss: no selected point lands on the grid")
    res = np.zeros_like(curr_pos)
    res[used] = curr_pos[used] - (prev_pos[used] + fl[used])
    loss = float((res[used] ** 2).sum() / (2 * k))
    d_curr = res / k
    return loss, d_curr, used


def isotropic_loss(scene: GaussianScene):
    """Mean per-point population std of the decoded scale components.

    Zero exactly when every point is isotropic.  Returns (loss, d_slog).
    """
    s = scene.scales()
    n = len(s)
    if n == 0:
        return 0.0, np.zeros((0, 3))
    mean = s.mean(axis=1, keepdims=True)
    dev = s - mean
    # pairwise form of the population variance: exactly zero for equal
    # components, which mean subtraction alone does not guarantee
    d01 = s[:, 0] - s[:, 1]
    d12 = s[:, 1] - s[:, 2]
    d20 = s[:, 2] - s[:, 0]
    std = np.sqrt((d01 ** 2 + d12 ** 2 + d20 ** 2) / 9.0)
    loss = float(std.mean())
    safe = np.where(std > 1e-12, std, 1.0)
    d_s = np.where(std[:, None] > 1e-12, dev / (3.0 * safe[:, None] * n), 0.0)
    return loss, d_s * s

"""On-disk sequence layout shared by the oracle generator, the engine,
and external prior exporters.

    <dataset>/
      manifest.txt            frames=N / height=H / width=W
      intrinsics.txt          fx fy cx cy (single line, shared)
      frames/frame_%04d.png
      depth/depth_%04d.gft    per-pixel camera depth, frame t
      flow_fwd/flow_%04d.gft  flow t -> t+1 on frame t's grid (t < N-1)
      flow_bwd/flow_%04d.gft  flow t -> t-1 on frame t's grid (t >= 1)
      gt/                     optional: trajectory.txt, moving_%04d.png,
                              newcontent_%04d.png

Ingest optionally downscales so the shortest side matches a target,
rescaling intrinsics and flow vectors by the same factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics, Trajectory
from .errors import DimMismatch
from .tensors import load_image, load_mask, load_tensor, save_tensor


def save_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(f"# fx fy cx cy\n{K.fx:.17g} {K.fy:.17g} "
                          f"{K.cx:.17g} {K.cy:.17g}\n")


def load_intrinsics(path) -> Intrinsics:
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fx, fy, cx, cy = (float(v) for v in line.split()[:4])
        return Intrinsics(fx, fy, cx, cy)
    raise ValueError(f"no intrinsics line in {path}")


def _parse_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@dataclass
class Sequence:
    """A fully loaded input sequence (images, priors, intrinsics)."""
    images: list        # (H, W, 3) float in [0, 1]
    depths: list        # (H, W) float
    flow_fwd: list      # (H, W, 2) or None at the last frame
    flow_bwd: list      # (H, W, 2) or None at frame 0
    K: Intrinsics
    path: Path | None = None
    depth_scale: float = 1.0
    gt_trajectory: Trajectory | None = None
    gt_moving: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.images)

    @property
    def shape(self):
        return self.images[0].shape[:2]


def load_sequence(root, with_gt: bool = False) -> Sequence:
    root = Path(root)
    man = _parse_manifest(root / "manifest.txt")
    n = int(man["frames"])
    h, w = int(man["height"]), int(man["width"])
    K = load_intrinsics(root / "intrinsics.txt")

    images, depths, fwd, bwd = [], [], [], []
    for t in range(n):
        img = load_image(root / "frames" / f"frame_{t:04d}.png")
        dep = load_tensor(root / "depth" / f"depth_{t:04d}.gft")
        if img.shape[:2] != (h, w) or dep.shape != (h, w):
            raise DimMismatch(f"frame {t} dims disagree with manifest")
        images.append(np.asarray(img, dtype=np.float64))
        depths.append(np.asarray(dep, dtype=np.float64))
        if t < n - 1:
            f = load_tensor(root / "flow_fwd" / f"flow_{t:04d}.gft")
            if f.shape != (h, w, 2):
                raise DimMismatch(f"forward flow {t} has shape {f.shape}")
            fwd.append(np.asarray(f, dtype=np.float64))
        else:
            fwd.append(None)
        if t >= 1:
            f = load_tensor(root / "flow_bwd" / f"flow_{t:04d}.gft")
            if f.shape != (h, w, 2):
                raise DimMismatch(f"backward flow {t} has shape {f.shape}")
            bwd.append(np.asarray(f, dtype=np.float64))
        else:
            bwd.append(None)

    seq = Sequence(images, depths, fwd, bwd, K, path=root)
    if with_gt:
        gt = root / "gt"
        traj = gt / "trajectory.txt"
        if traj.exists():
            seq.gt_trajectory = Trajectory.load(traj)
        for t in range(n):
            m = gt / f"moving_{t:04d}.png"
            seq.gt_moving.append(load_mask(m) if m.exists() else None)
    return seq


def write_sequence(root, images, depths, flows_fwd, flows_bwd,
                   K: Intrinsics) -> None:
    """Write the core layout (no gt/); images quantized to 8-bit PNG."""
    root = Path(root)
    n = len(images)
    h, w = np.asarray(images[0]).shape[:2]
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text(f"frames={n}\nheight={h}\nwidth={w}\n")
    save_intrinsics(root / "intrinsics.txt", K)
    for t in range(n):
        arr = np.clip(np.asarray(images[t], dtype=np.float64), 0.0, 1.0)
        img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
        (root / "frames").mkdir(exist_ok=True)
        img.save(root / "frames" / f"frame_{t:04d}.png")
        save_tensor(root / "depth" / f"depth_{t:04d}.gft", depths[t])
        if t < n - 1 and flows_fwd[t] is not None:
            save_tensor(root / "flow_fwd" / f"flow_{t:04d}.gft", flows_fwd[t])
        if t >= 1 and flows_bwd[t] is not None:
            save_tensor(root / "flow_bwd" / f"flow_{t:04d}.gft", flows_bwd[t])


def _resize_plane(arr, size):
    img = Image.fromarray(np.asarray(arr, dtype=np.float32), mode="F")
    return np.asarray(img.resize(size, Image.BILINEAR), dtype=np.float64)


def resize_shortest_side(seq: Sequence, target: int) -> Sequence:
    """Downscale so the shortest side equals the target; smaller inputs
    are left untouched.  Flow vectors and intrinsics scale with the
    image."""
    h, w = seq.shape
    short = min(h, w)
    if short <= target:
        return seq
    f = target / short
    nh, nw = int(round(h * f)), int(round(w * f))
    size = (nw, nh)
    fy, fx = nh / h, nw / w
    images = []
    depths = []
    fwd, bwd = [], []
    for t in range(seq.n_frames):
        chans = [_resize_plane(seq.images[t][..., c], size) for c in range(3)]
        images.append(np.clip(np.stack(chans, axis=-1), 0.0, 1.0))
        depths.append(_resize_plane(seq.depths[t], size))
        for src, dst in ((seq.flow_fwd[t], fwd), (seq.flow_bwd[t], bwd)):
            if src is None:
                dst.append(None)
            else:
                u = _resize_plane(src[..., 0], size) * fx
                v = _resize_plane(src[..., 1], size) * fy
                dst.append(np.stack([u, v], axis=-1))
    K = Intrinsics(seq.K.fx * fx, seq.K.fy * fy, seq.K.cx * fx, seq.K.cy * fy)
    return Sequence(images, depths, fwd, bwd, K, path=seq.path,
                    depth_scale=seq.depth_scale,
                    gt_trajectory=seq.gt_trajectory, gt_moving=seq.gt_moving)


def normalize_scene_scale(seq: Sequence) -> float:
    """Rescale all depths so the first frame's median prior depth is 1.
    Returns the applied divisor (recorded for interpreting outputs)."""
    med = float(np.median(seq.depths[0]))
    if med <= 0:
        return 1.0
    seq.depths = [d / med for d in seq.depths]
    seq.depth_scale *= med
    return med

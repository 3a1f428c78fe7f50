"""Turn a directory of video frames plus estimator backends into a
reconstruction-ready dataset.

Output layout (what the engine's loader ingests):

    <out>/
      manifest.txt            frames=N / height=H / width=W
      intrinsics.txt          fx fy cx cy
      frames/frame_%04d.png
      depth/depth_%04d.gft
      flow_fwd/flow_%04d.gft  t -> t+1, frames 0..N-2
      flow_bwd/flow_%04d.gft  t -> t-1, frames 1..N-1

Every frame must end up with an image, a depth map, and both flow
directions (sequence endpoints excepted); extraction fails with
FrameCountMismatch otherwise.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
from PIL import Image

from . import gft
from .backends import Frame, get_backend
from .errors import BackendUnavailable, FrameCountMismatch

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _find_frames(frames_dir: Path) -> list[Path]:
    root = Path(frames_dir)
    if (root / "frames").is_dir():
        root = root / "frames"
    paths = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FrameCountMismatch(f"no frames found under {frames_dir}")
    return paths


def _decode(path: Path, short_side: int | None):
    img = Image.open(path).convert("RGB")
    scale = 1.0
    if short_side is not None and min(img.size) > short_side:
        scale = short_side / min(img.size)
        img = img.resize((int(round(img.width * scale)),
                          int(round(img.height * scale))), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0, scale


def _write_frame(src: Path, dst: Path, image: np.ndarray, resized: bool) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    if not resized and src.suffix.lower() == ".png":
        shutil.copyfile(src, dst)  # keep original encoding bit-exact
        return
    quant = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant).save(dst)


def extract(frames_dir, out_dir, depth_backend: str = "passthrough",
            flow_backend: str = "passthrough", source=None,
            intrinsics=None, short_side: int | None = None) -> Path:
    """Build a dataset at out_dir from frames plus backend priors.

    source points the backends at their inputs (for passthrough, the
    directory holding existing priors); it defaults to frames_dir.
    intrinsics overrides backend-reported values as (fx, fy, cx, cy).
    Returns out_dir.
    """
    frames_dir = Path(frames_dir)
    out = Path(out_dir)
    source = Path(source) if source is not None else frames_dir

    dep_be = get_backend(depth_backend, source)
    flo_be = dep_be if flow_backend == depth_backend \
        else get_backend(flow_backend, source)

    paths = _find_frames(frames_dir)
    frames = []
    scale = 1.0
    for i, p in enumerate(paths):
        image, scale = _decode(p, short_side)
        frames.append(Frame(i, p, image))
    h, w = frames[0].image.shape[:2]
    for fr in frames:
        if fr.image.shape[:2] != (h, w):
            raise FrameCountMismatch(
                f"frame {fr.index} is {fr.image.shape[:2]}, first frame is {(h, w)}")

    for fr in frames:
        _write_frame(fr.path, out / "frames" / f"frame_{fr.index:04d}.png",
                     fr.image, scale != 1.0)
        dep = np.asarray(dep_be.depth(fr), dtype=np.float32)
        if dep.shape != (h, w):
            raise FrameCountMismatch(
                f"depth for frame {fr.index} is {dep.shape}, frames are {(h, w)}")
        gft.save_tensor(out / "depth" / f"depth_{fr.index:04d}.gft", dep)

    for a, b in zip(frames[:-1], frames[1:]):
        fwd = np.asarray(flo_be.flow(a, b), dtype=np.float32)
        bwd = np.asarray(flo_be.flow(b, a), dtype=np.float32)
        for arr, dirname, idx in ((fwd, "flow_fwd", a.index),
                                  (bwd, "flow_bwd", b.index)):
            if arr.shape != (h, w, 2):
                raise FrameCountMismatch(
                    f"{dirname} for frame {idx} is {arr.shape}, "
                    f"expected {(h, w, 2)}")
            gft.save_tensor(out / dirname / f"flow_{idx:04d}.gft", arr)

    if intrinsics is None:
        for be in (dep_be, flo_be):
            got = getattr(be, "intrinsics", lambda: None)()
            if got is not None:
                intrinsics = got
                break
    if intrinsics is None:
        raise BackendUnavailable(
            "no intrinsics: pass them explicitly or use a backend that "
            "estimates them")
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    if scale != 1.0:
        fx, fy, cx, cy = fx * scale, fy * scale, cx * scale, cy * scale

    (out / "intrinsics.txt").write_text(
        f"# fx fy cx cy\n{fx:.17g} {fy:.17g} {cx:.17g} {cy:.17g}\n")
    lines = [f"frames={len(frames)}", f"height={h}", f"width={w}"]
    if scale != 1.0:
        lines.append(f"resize_scale={scale:.17g}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")

    _validate(out, len(frames))
    return out


def _validate(out: Path, n: int) -> None:
    """Final completeness gate over the emitted dataset."""
    missing = []
    for t in range(n):
        checks = [out / "frames" / f"frame_{t:04d}.png",
                  out / "depth" / f"depth_{t:04d}.gft"]
        if t < n - 1:
            checks.append(out / "flow_fwd" / f"flow_{t:04d}.gft")
        if t > 0:
            checks.append(out / "flow_bwd" / f"flow_{t:04d}.gft")
        missing.extend(str(p) for p in checks if not p.exists())
    if missing:
        raise FrameCountMismatch(
            f"dataset incomplete, missing {len(missing)} file(s): "
            + ", ".join(missing[:4]))

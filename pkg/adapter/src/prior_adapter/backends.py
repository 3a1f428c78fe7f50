"""Estimator backends behind a two-function interface.

A backend supplies depth(frame) -> (H, W) map and flow(a, b) ->
(H, W, 2) field; frames are Frame records carrying index, path, and
the decoded image.  Model-specific backends plug in here so estimator
choices never leak into the engine; the built-in one passes through
priors that already exist on disk (rendered ground truth or a
previously extracted dataset).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendUnavailable, FrameCountMismatch


@dataclass
class Frame:
    index: int
    path: Path
    image: np.ndarray  # (H, W, 3) float in [0, 1]


class PassthroughBackend:
    """Re-emits precomputed priors stored next to the frames.

    Expects the engine's own layout under source: depth/depth_%04d.gft,
    flow_fwd/flow_%04d.gft, flow_bwd/flow_%04d.gft, intrinsics.txt.
    """

    name = "passthrough"

    def __init__(self, source):
        from . import gft
        self._gft = gft
        self.source = Path(source)
        if not (self.source / "depth").is_dir():
            raise BackendUnavailable(
                f"passthrough needs precomputed priors under {self.source}")

    def _load(self, rel: str, what: str) -> np.ndarray:
        path = self.source / rel
        if not path.exists():
            raise FrameCountMismatch(f"missing {what}: {path}")
        return self._gft.load_tensor(path)

    def depth(self, frame: Frame) -> np.ndarray:
        return self._load(f"depth/depth_{frame.index:04d}.gft",
                          f"depth for frame {frame.index}")

    def flow(self, a: Frame, b: Frame) -> np.ndarray:
        if b.index == a.index + 1:
            return self._load(f"flow_fwd/flow_{a.index:04d}.gft",
                              f"forward flow {a.index}->{b.index}")
        if b.index == a.index - 1:
            return self._load(f"flow_bwd/flow_{a.index:04d}.gft",
                              f"backward flow {a.index}->{b.index}")
        raise ValueError(f"non-adjacent flow request {a.index}->{b.index}")

    def intrinsics(self):
        path = self.source / "intrinsics.txt"
        if not path.exists():
            return None
        for line in path.read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                fx, fy, cx, cy = (float(v) for v in line.split()[:4])
                return fx, fy, cx, cy
        return None


_REGISTRY = {"passthrough": PassthroughBackend}


def get_backend(name: str, source):
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise BackendUnavailable(
            f"unknown backend {name!r}; available: {sorted(_REGISTRY)}")
    return cls(source)

"""Synthetic ground-truth scene generator.

Produces complete input sequences (frames, exact depth, exact
bidirectional flow, intrinsics) plus ground truth (trajectory, moving
masks, new-content masks) for testing, at desk scale.

Two scene kinds:

  * blobs: a gently corrugated wall tiled with small Gaussian blobs
    (the same primitive the renderer composites, so a perfect
    reconstruction exists), optionally plus rigid blob-cluster objects
    translating through the scene.  The corrugation gives the static
    background real depth variation, which keeps two-view geometry
    non-degenerate.
  * plane: a flat wall with a smooth procedural texture (not made of
    Gaussians), exercising model mismatch.

Ground-truth depth is the analytic ray intersection with the owning
surface: the wall heightfield, or a moving object's billboard plane
(constant world z through the object center).  Pixel ownership is
decided by majority compositing weight.  Flow advects the surface
point with its owner's rigid motion and reprojects into the other
frame, so flow, depth, and poses are mutually exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Extrinsics, Intrinsics, Trajectory, project_points
from .errors import SpecInvalid
from .renderer import render
from .scene import GaussianScene, encode_alpha
from .tensors import rng_stream, save_mask
from .dataset import write_sequence


@dataclass
class OracleSpec:
    kind: str = "blobs"          # blobs | plane
    frames: int = 12
    height: int = 96
    width: int = 160
    focal: float = 110.0
    seed: int = 0
    camera: str = "track"        # track | orbit | static
    cam_step: float = 0.06       # track: world units/frame; orbit: degrees
    pivot_z: float = 7.0         # orbit pivot distance
    wall_z: float = 2.8
    wall_amp: float = 0.12       # corrugation amplitude
    wall_wave: float = 1.4       # corrugation wavelength (world units)
    spacing_px: float = 4.5      # blob grid pitch on screen
    blob_px: float = 2.3         # blob sigma on screen
    n_objects: int = 0
    n_static: int = 0            # motionless blob clusters (depth structure)
    obj_z: float = 1.7
    obj_radius: float = 0.14
    obj_blobs: int = 60
    obj_vx: float = 0.04
    obj_vy: float = 0.09
    tex_cells: int = 6           # plane kind: texture harmonics

    def validate(self):
        if self.kind not in ("blobs", "plane"):
            raise SpecInvalid(f"unknown scene kind {self.kind!r}")
        if self.camera not in ("track", "orbit", "static"):
            raise SpecInvalid(f"unknown camera path {self.camera!r}")
        if self.frames < 1 or self.height < 16 or self.width < 16:
            raise SpecInvalid("frames >= 1 and resolution >= 16 px required")
        if self.focal <= 0 or self.wall_z <= 0:
            raise SpecInvalid("focal and wall depth must be positive")
        if min(self.n_objects, self.n_static) < 0 \
                or self.kind == "plane" and (self.n_objects or self.n_static):
            raise SpecInvalid("objects are only supported in blobs scenes")
        return self


def parse_scene_spec(text: str) -> OracleSpec:
    spec = OracleSpec()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecInvalid(f"expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not hasattr(spec, key):
            raise SpecInvalid(f"unknown scene key {key!r}")
        cur = getattr(spec, key)
        try:
            setattr(spec, key, type(cur)(val) if not isinstance(cur, str) else val)
        except ValueError as e:
            raise SpecInvalid(f"bad value for {key}: {val!r}") from e
    return spec.validate()


def camera_path(spec: OracleSpec) -> list:
    """World-to-camera poses; world frame = first camera frame."""
    poses = []
    for t in range(spec.frames):
        if spec.camera == "static":
            poses.append(Extrinsics.identity())
        elif spec.camera == "track":
            center = np.array([spec.cam_step * t, 0.0, 0.0])
            cam2world = Extrinsics(np.array([1.0, 0, 0, 0]), center)
            poses.append(cam2world.inverse())
        else:  # orbit about a pivot ahead of the first camera
            th = np.deg2rad(spec.cam_step) * t
            r = spec.pivot_z
            center = np.array([r * np.sin(th), 0.0, r * (1 - np.cos(th))])
            z_axis = np.array([-np.sin(th), 0.0, np.cos(th)])
            x_axis = np.array([np.cos(th), 0.0, np.sin(th)])
            y_axis = np.array([0.0, 1.0, 0.0])
            R_c2w = np.stack([x_axis, y_axis, z_axis], axis=1)
            poses.append(Extrinsics.from_rt(R_c2w.T, -R_c2w.T @ center))
    return poses


class _Wall:
    """Corrugated heightfield z = wall_z + amp sin(2pi x/w) cos(2pi y/w)."""

    def __init__(self, spec: OracleSpec):
        self.z0 = spec.wall_z
        self.amp = spec.wall_amp
        self.k = 2.0 * np.pi / spec.wall_wave

    def height(self, x, y):
        return self.z0 + self.amp * np.sin(self.k * x) * np.cos(self.k * y)

    def grad(self, x, y):
        gx = self.amp * self.k * np.cos(self.k * x) * np.cos(self.k * y)
        gy = -self.amp * self.k * np.sin(self.k * x) * np.sin(self.k * y)
        return gx, gy

    def intersect(self, origin, dirs):
        """Ray parameter of the surface hit; dirs carry unit camera-z
        component, so the parameter equals camera depth."""
        lam = (self.z0 - origin[2]) / dirs[:, 2]
        for _ in range(12):
            x = origin[0] + lam * dirs[:, 0]
            y = origin[1] + lam * dirs[:, 1]
            z = origin[2] + lam * dirs[:, 2]
            g = z - self.height(x, y)
            gx, gy = self.grad(x, y)
            dg = dirs[:, 2] - gx * dirs[:, 0] - gy * dirs[:, 1]
            lam = lam - g / dg
        return lam


def _smooth_color_field(rng, n_waves=4):
    """Band-limited random RGB field over world (x, y)."""
    freq = rng.uniform(0.4, 1.6, size=(n_waves, 2)) * rng.choice([-1, 1], size=(n_waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(n_waves, 3))
    amp = rng.uniform(0.08, 0.22, size=(n_waves, 3))

    def color(x, y):
        base = np.full(x.shape + (3,), 0.55)
        for j in range(n_waves):
            arg = 2 * np.pi * (freq[j, 0] * x + freq[j, 1] * y)
            base += amp[j] * np.sin(arg[..., None] + phase[j])
        return np.clip(base, 0.03, 0.97)
    return color


@dataclass
class _Object:
    offsets: np.ndarray
    colors: np.ndarray
    sigma: float
    start: np.ndarray
    vel: np.ndarray

    def center(self, t: int) -> np.ndarray:
        return self.start + self.vel * t


class OracleScene:
    """Assembled scene content with analytic per-frame ground truth."""

    def __init__(self, spec: OracleSpec):
        spec.validate()
        self.spec = spec
        self.K = Intrinsics(spec.focal, spec.focal,
                            (spec.width - 1) / 2.0, (spec.height - 1) / 2.0)
        self.poses = camera_path(spec)
        self.wall = _Wall(spec)
        rng = rng_stream(spec.seed, "oracle-scene")
        self.objects: list[_Object] = []

        if spec.kind == "blobs":
            self._build_wall_blobs(rng)
            for i in range(spec.n_objects):
                self._build_object(rng, i, moving=True)
            for i in range(spec.n_static):
                self._build_object(rng, spec.n_objects + i, moving=False)
        else:
            self.tex = _smooth_color_field(rng, spec.tex_cells)

    # --- content construction ---

    def _frustum_extent(self):
        """World-space rectangle on the wall seen across the whole path."""
        s = self.spec
        xs, ys = [], []
        for E in self.poses:
            inv = E.inverse()
            corners = np.array([[0.0, 0.0], [s.width - 1, 0.0],
                                [0.0, s.height - 1], [s.width - 1, s.height - 1]])
            d = np.stack([(corners[:, 0] - self.K.cx) / self.K.fx,
                          (corners[:, 1] - self.K.cy) / self.K.fy,
                          np.ones(4)], axis=1)
            dirs = d @ inv.rotation().T
            dirs = dirs / dirs[:, 2:3]
            c = inv.t
            lam = (s.wall_z + s.wall_amp - c[2])
            pts = c[None, :] + lam * dirs
            xs.extend(pts[:, 0]); ys.extend(pts[:, 1])
        pad = 0.35
        return (min(xs) - pad, max(xs) + pad, min(ys) - pad, max(ys) + pad)

    def _build_wall_blobs(self, rng):
        s = self.spec
        x0, x1, y0, y1 = self._frustum_extent()
        pitch = s.spacing_px * s.wall_z / s.focal
        gx = np.arange(x0, x1 + pitch, pitch)
        gy = np.arange(y0, y1 + pitch, pitch)
        X, Y = np.meshgrid(gx, gy)
        jitter = rng.uniform(-0.25, 0.25, size=(2,) + X.shape) * pitch
        x = (X + jitter[0]).ravel()
        y = (Y + jitter[1]).ravel()
        z = self.wall.height(x, y)
        centers = np.stack([x, y, z], axis=1)
        color_of = _smooth_color_field(rng)
        colors = color_of(x, y)
        colors += rng.uniform(-0.05, 0.05, size=colors.shape)
        sigma = s.blob_px * s.wall_z / s.focal
        self.wall_mu = centers
        self.wall_color = np.clip(colors, 0.02, 0.98)
        self.wall_sigma = sigma

    def _build_object(self, rng, idx, moving=True):
        s = self.spec
        n = s.obj_blobs
        off = rng.normal(scale=s.obj_radius / 2.0, size=(n, 3))
        off = off[np.linalg.norm(off, axis=1) < s.obj_radius * 1.2][:n]
        hue = np.array([0.85, 0.45, 0.15]) if idx % 2 == 0 else np.array([0.2, 0.5, 0.85])
        colors = np.clip(hue + rng.uniform(-0.12, 0.12, size=(len(off), 3)), 0.05, 0.95)
        if moving:
            start = np.array([
                -0.35 + 0.5 * idx,
                -0.32 - 0.1 * idx,
                s.obj_z + 0.15 * idx,
            ])
            vel = np.array([s.obj_vx, s.obj_vy, 0.0])
        else:
            # motionless clusters fanned over the view at varied depths
            k = idx - s.n_objects
            start = np.array([
                -0.9 + 0.75 * k + rng.uniform(-0.1, 0.1),
                0.55 * ((k % 3) - 1) + rng.uniform(-0.1, 0.1),
                1.45 + 0.4 * (k % 3) + rng.uniform(-0.05, 0.05),
            ])
            vel = np.zeros(3)
        sigma = s.blob_px * 0.9 * start[2] / s.focal
        self.objects.append(_Object(off, colors, sigma, start, vel))

    def gaussian_scene(self, t: int) -> GaussianScene:
        """All blobs at frame t as one renderable set (blobs kind)."""
        mus = [self.wall_mu]
        cols = [self.wall_color]
        sigs = [np.full(len(self.wall_mu), self.wall_sigma)]
        for ob in self.objects:
            mus.append(ob.center(t)[None, :] + ob.offsets)
            cols.append(ob.colors)
            sigs.append(np.full(len(ob.offsets), ob.sigma))
        mu = np.concatenate(mus)
        col = np.concatenate(cols)
        sig = np.concatenate(sigs)
        n = len(mu)
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return GaussianScene(mu, np.log(np.stack([sig] * 3, axis=1)),
                             np.full(n, encode_alpha(0.95)), q, col)

    def _group_sizes(self):
        sizes = [len(self.wall_mu)]
        sizes += [len(ob.offsets) for ob in self.objects]
        return sizes

    # --- analytic per-frame ground truth ---

    def _rays(self, t: int):
        s = self.spec
        E = self.poses[t]
        inv = E.inverse()
        xs, ys = np.meshgrid(np.arange(s.width, dtype=np.float64),
                             np.arange(s.height, dtype=np.float64))
        d = np.stack([(xs.ravel() - self.K.cx) / self.K.fx,
                      (ys.ravel() - self.K.cy) / self.K.fy,
                      np.ones(xs.size)], axis=1)
        # camera-frame z component stays 1 under rotation, so the ray
        # parameter is the camera depth for every camera path
        dirs = d @ inv.rotation().T
        return inv.t, dirs

    def owner_map(self, t: int) -> np.ndarray:
        """Per pixel: 0 = wall, g >= 1 = object g (majority weight)."""
        s = self.spec
        if s.kind == "plane" or not self.objects:
            return np.zeros((s.height, s.width), dtype=np.int32)
        scene = self.gaussian_scene(t)
        sizes = self._group_sizes()
        owner = np.zeros((s.height, s.width), dtype=np.int32)
        best = np.full((s.height, s.width), 0.5)
        start = sizes[0]
        for g, ob in enumerate(self.objects, start=1):
            marked = scene.copy()
            marked.color[:] = 0.0
            marked.color[start:start + sizes[g]] = 1.0
            out = render(marked, self.K, self.poses[t], s.height, s.width)
            share = np.where(out.acc_alpha > 1e-6,
                             out.color[..., 0] / np.maximum(out.acc_alpha, 1e-6), 0.0)
            take = share > best
            owner[take] = g
            best[take] = share[take]
            start += sizes[g]
        return owner

    def depth_map(self, t: int, owner=None) -> np.ndarray:
        s = self.spec
        if owner is None:
            owner = self.owner_map(t)
        origin, dirs = self._rays(t)
        lam = self.wall.intersect(origin, dirs)
        x, y, z = (origin[:, None] + lam * dirs.T)
        residual = np.abs(z - self.wall.height(x, y))
        if (lam <= 0.0).any() or (residual > 1e-6).any():
            raise SpecInvalid(
                f"frame {t}: camera path views the wall at grazing angles "
                "and the depth solve diverges; reduce the orbit arc "
                "(cam_step x frames)")
        lam = lam.reshape(s.height, s.width)
        for g, ob in enumerate(self.objects, start=1):
            zg = ob.center(t)[2]
            lg = ((zg - origin[2]) / dirs[:, 2]).reshape(s.height, s.width)
            lam = np.where(owner == g, lg, lam)
        return lam

    def surface_points(self, t: int, owner=None, depth=None):
        if depth is None:
            depth = self.depth_map(t, owner)
        origin, dirs = self._rays(t)
        return origin[None, :] + depth.reshape(-1, 1) * dirs

    def flow_map(self, t: int, to: int) -> np.ndarray:
        """Exact flow from frame t to frame `to` (adjacent in practice)."""
        s = self.spec
        owner = self.owner_map(t)
        X = self.surface_points(t, owner)
        shift = np.zeros_like(X)
        for g, ob in enumerate(self.objects, start=1):
            delta = ob.center(to) - ob.center(t)
            shift[(owner == g).ravel()] = delta
        xy, _, _ = project_points(X + shift, self.K, self.poses[to])
        xs, ys = np.meshgrid(np.arange(s.width, dtype=np.float64),
                             np.arange(s.height, dtype=np.float64))
        grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return (xy - grid).reshape(s.height, s.width, 2)

    def moving_mask(self, t: int) -> np.ndarray:
        owner = self.owner_map(t)
        mask = np.zeros(owner.shape, dtype=bool)
        for g, ob in enumerate(self.objects, start=1):
            if np.any(ob.vel != 0.0):
                mask |= owner == g
        return mask

    def new_content_mask(self, t: int) -> np.ndarray:
        """Pixels of frame t not visible in frame t-1 (occluded there or
        outside the previous view)."""
        s = self.spec
        owner = self.owner_map(t)
        depth = self.depth_map(t, owner)
        X = self.surface_points(t, owner, depth)
        shift = np.zeros_like(X)
        for g, ob in enumerate(self.objects, start=1):
            delta = ob.center(t - 1) - ob.center(t)
            shift[(owner == g).ravel()] = delta
        Xp = X + shift
        xy, z, in_front = project_points(Xp, self.K, self.poses[t - 1])
        prev_depth = self.depth_map(t - 1)
        xi = np.clip(np.rint(xy[:, 0]).astype(int), 0, s.width - 1)
        yi = np.clip(np.rint(xy[:, 1]).astype(int), 0, s.height - 1)
        seen = prev_depth[yi, xi]
        out_of_view = (~in_front | (xy[:, 0] < -0.5) | (xy[:, 0] >= s.width - 0.5)
                       | (xy[:, 1] < -0.5) | (xy[:, 1] >= s.height - 0.5))
        occluded = seen < z - 0.02 * z
        return (out_of_view | occluded).reshape(s.height, s.width)

    def frame(self, t: int) -> np.ndarray:
        s = self.spec
        if s.kind == "blobs":
            out = render(self.gaussian_scene(t), self.K, self.poses[t],
                         s.height, s.width, background=(0.02, 0.02, 0.02))
            return out.color
        X = self.surface_points(t)
        img = self.tex(X[:, 0], X[:, 1])
        return img.reshape(s.height, s.width, 3)


def generate(spec: OracleSpec, out_dir) -> Path:
    """Render the oracle scene and write the full dataset layout + gt/."""
    out = Path(out_dir)
    scene = OracleScene(spec)
    n = spec.frames
    images = [scene.frame(t) for t in range(n)]
    depths = [scene.depth_map(t) for t in range(n)]
    fwd = [scene.flow_map(t, t + 1) if t < n - 1 else None for t in range(n)]
    bwd = [scene.flow_map(t, t - 1) if t >= 1 else None for t in range(n)]
    write_sequence(out, images, depths, fwd, bwd, scene.K)

    gt = out / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    Trajectory(list(enumerate(scene.poses))).save(gt / "trajectory.txt")
    for t in range(n):
        save_mask(gt / f"moving_{t:04d}.png", scene.moving_mask(t))
        if t >= 1:
            save_mask(gt / f"newcontent_{t:04d}.png", scene.new_content_mask(t))
    return out

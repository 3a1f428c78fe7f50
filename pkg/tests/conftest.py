"""Shared fixtures: small synthetic datasets and one tiny end-to-end run.

Everything here is session-scoped and deliberately small so the unit
suite stays fast; the heavyweight quantitative runs live in
test_acceptance.py with their own budgets.
"""

from __future__ import annotations

import numpy as np
import pytest

from splat4d.camera import Extrinsics, Intrinsics
from splat4d.config import Config
from splat4d.dataset import load_sequence, normalize_scene_scale
from splat4d.oracle import OracleSpec, generate
from splat4d.scene import GaussianScene
from splat4d import engine


def make_scene(rng, n, spread=1.0, z0=4.0, dz=2.0, sigma=0.08):
    """Random well-conditioned gaussian cloud in front of the camera."""
    mu = np.stack([rng.uniform(-spread, spread, n),
                   rng.uniform(-spread, spread, n),
                   rng.uniform(z0, z0 + dz, n)], axis=1)
    s_log = np.log(sigma * rng.uniform(0.5, 2.0, (n, 3)))
    alpha_logit = rng.uniform(-1.0, 3.0, n)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    color = rng.uniform(0.05, 0.95, (n, 3))
    return GaussianScene(mu, s_log, alpha_logit, q, color)


def small_camera(h=40, w=56, f=45.0):
    return Intrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0), h, w


TINY_CFG = Config(n_ini=300, iters_first=60, densify_steps_first=(20, 40),
                  iters_cam=25, iters_gauss=40, densify_steps=(15, 30),
                  err_threshold=0.05, seed=3)


@pytest.fixture(scope="session")
def static_ds(tmp_path_factory):
    """3-frame static blob scene with real parallax, ground truth kept."""
    spec = OracleSpec(kind="blobs", frames=3, height=64, width=96,
                      focal=70.0, camera="track", cam_step=0.08,
                      n_static=2, seed=11)
    root = tmp_path_factory.mktemp("static_ds")
    generate(spec, root)
    return root, spec


@pytest.fixture(scope="session")
def dyn_ds(tmp_path_factory):
    """3-frame scene with one moving object over structured background."""
    spec = OracleSpec(kind="blobs", frames=3, height=64, width=96,
                      focal=70.0, camera="track", cam_step=0.08,
                      n_objects=1, n_static=3, seed=7)
    root = tmp_path_factory.mktemp("dyn_ds")
    generate(spec, root)
    return root, spec


@pytest.fixture(scope="session")
def tiny_run(static_ds, tmp_path_factory):
    """Small but complete reconstruction used by the apps/cli tests."""
    root, spec = static_ds
    seq = load_sequence(root, with_gt=True)
    normalize_scene_scale(seq)
    out = tmp_path_factory.mktemp("tiny_run")
    traj, results = engine.run(seq, TINY_CFG, out_dir=out)
    return {"out": out, "traj": traj, "results": results, "seq": seq,
            "spec": spec, "cfg": TINY_CFG, "data": root}

from __future__ import annotations

import numpy as np
import pytest

from splat4d.allocation import (densify, init_gaussians, masked_prob_map,
                                new_content_mask, sample_points,
                                texture_prob_map)
from splat4d.camera import Extrinsics, Intrinsics, project_points
from splat4d.dataset import load_sequence
from splat4d.errors import EmptySupport
from splat4d.scene import STILL, GaussianScene
from splat4d.tensors import load_mask, rng_stream


def test_texture_map_constant_image_is_uniform():
    img = np.full((12, 16, 3), 0.5)
    smap = texture_prob_map(img)
    assert np.allclose(smap.prob, 1.0 / (12 * 16))
    assert smap.support.all()
    assert smap.prob.sum() == pytest.approx(1.0)


def test_texture_map_step_edge_concentrates_mass():
    img = np.zeros((16, 20, 3))
    img[:, 10:] = 1.0
    smap = texture_prob_map(img)
    cols = smap.prob.sum(axis=0)
    # all mass within one pixel of the step
    assert cols[9:11].sum() == pytest.approx(1.0)
    assert cols[:8].sum() == 0.0
    assert cols[12:].sum() == 0.0


def test_texture_map_normalizes_random_images():
    rng = np.random.default_rng(0)
    for _ in range(5):
        smap = texture_prob_map(rng.uniform(size=(10, 14, 3)))
        assert smap.prob.sum() == pytest.approx(1.0)
        assert np.all(smap.prob >= 0.0)


def test_sample_points_zero_and_degenerate():
    img = np.full((8, 8, 3), 0.3)
    smap = texture_prob_map(img)
    assert sample_points(smap, 0, rng_stream(0, "t")).shape == (0, 2)

    mask = np.zeros((8, 8), dtype=bool)
    mask[3, 5] = True
    one = masked_prob_map(None, mask)
    pts = sample_points(one, 50, rng_stream(0, "t"))
    assert np.all(pts == [5, 3])


def test_sample_points_empty_support_raises():
    empty = masked_prob_map(None, np.zeros((4, 4), dtype=bool))
    with pytest.raises(EmptySupport):
        sample_points(empty, 3, rng_stream(0, "t"))


def test_sample_points_match_probabilities():
    prob = np.array([[0.9, 0.1]])
    smap = masked_prob_map(prob, np.ones((1, 2), dtype=bool))
    n = 100_000
    pts = sample_points(smap, n, rng_stream(1, "ratio"))
    hits = int(np.sum(pts[:, 0] == 0))
    sigma = np.sqrt(n * 0.9 * 0.1)
    assert abs(hits - 0.9 * n) <= 3 * sigma


def test_init_gaussians_paper_budget_and_copy_semantics():
    rng = rng_stream(7, "init")
    img = np.clip(np.random.default_rng(2).uniform(size=(32, 40, 3)), 0, 1)
    depth = np.random.default_rng(3).uniform(2.0, 4.0, size=(32, 40))
    K = Intrinsics(30.0, 30.0, 19.5, 15.5)
    E = Extrinsics.identity()
    sc = init_gaussians(img, depth, K, E, 50_000, rng, scale_gain=5e3)
    assert len(sc) == 50_000

    xy, _, ok = project_points(sc.mu, K, E)
    assert ok.all()
    px = np.rint(xy).astype(int)
    # unproject/project round trip puts centers back on their pixels
    assert np.max(np.abs(xy - px)) <= 0.5
    assert np.max(np.abs(xy - px)) < 1e-6
    # colors are copied exactly from the source pixels
    assert np.array_equal(sc.color, img[px[:, 1], px[:, 0]])
    assert np.all(sc.cluster == STILL)
    assert np.all(sc.birth == 0)
    assert np.allclose(sc.alphas(), 0.99, atol=1e-9)


def test_new_content_consistent_translation():
    h, w = 10, 14
    fwd = np.zeros((h, w, 2))
    fwd[..., 0] = 1.0
    bwd = np.zeros((h, w, 2))
    bwd[..., 0] = -1.0
    mask = new_content_mask(fwd, bwd, fb_threshold=1.0)
    # interior round trips agree exactly; only the strip whose midpoint
    # exits the grid is flagged as unverifiable
    assert not mask[:, :-1].any()
    assert mask[:, -1].all()


def test_new_content_inconsistent_everywhere():
    h, w = 10, 14
    fwd = np.zeros((h, w, 2))
    fwd[..., 0] = 5.0
    bwd = np.zeros((h, w, 2))
    assert new_content_mask(fwd, bwd, fb_threshold=1.0).all()


def test_new_content_matches_oracle_disocclusion(dyn_ds):
    root, spec = dyn_ds
    seq = load_sequence(root)
    got = new_content_mask(seq.flow_bwd[1], seq.flow_fwd[0], 1.0)
    want = load_mask(root / "gt" / "newcontent_0001.png")
    inter = np.logical_and(got, want).sum()
    union = np.logical_or(got, want).sum()
    assert union > 0
    assert inter / union >= 0.7


def _flat_scene():
    return GaussianScene(np.array([[0.0, 0.0, 3.0]]), np.full((1, 3), -2.0),
                         np.zeros(1), np.array([[1.0, 0, 0, 0]]),
                         np.full((1, 3), 0.5))


def test_densify_count_formula():
    h, w = 20, 25
    mask = np.zeros((h, w), dtype=bool)
    mask[:4, :25] = True                      # 100 / 500 = ratio 0.2
    img = np.random.default_rng(4).uniform(size=(h, w, 3))
    depth = np.full((h, w), 2.0)
    K = Intrinsics(20.0, 20.0, 12.0, 9.5)
    sc = _flat_scene()
    n = densify(sc, img, depth, K, Extrinsics.identity(), 50_000,
                rng_stream(0, "densify"), mask)
    assert n == 10_000
    assert len(sc) == 1 + 10_000


def test_densify_empty_mask_is_noop():
    sc = _flat_scene()
    n = densify(sc, np.zeros((8, 8, 3)), np.full((8, 8), 2.0),
                Intrinsics(10, 10, 3.5, 3.5), Extrinsics.identity(), 1000,
                rng_stream(0, "densify"), np.zeros((8, 8), dtype=bool))
    assert n == 0
    assert len(sc) == 1


def test_densify_error_patch_confines_new_points():
    h, w = 40, 40
    err = np.zeros((h, w))
    err[12:22, 5:15] = 0.4                    # 10x10 hot patch
    mask = err > 0.01
    img = np.random.default_rng(5).uniform(size=(h, w, 3))
    depth = np.full((h, w), 2.5)
    K = Intrinsics(25.0, 25.0, 19.5, 19.5)
    sc = _flat_scene()
    n = densify(sc, img, depth, K, Extrinsics.identity(), 3200,
                rng_stream(1, "densify"), mask, error_map=err)
    assert n == int(round(100 / 1600 * 3200))
    xy, _, ok = project_points(sc.mu[1:], K, Extrinsics.identity())
    assert ok.all()
    px = np.rint(xy).astype(int)
    assert np.all((px[:, 0] >= 5) & (px[:, 0] < 15))
    assert np.all((px[:, 1] >= 12) & (px[:, 1] < 22))


def test_densify_ids_are_fresh_and_existing_untouched():
    sc = _flat_scene()
    before_mu = sc.mu.copy()
    old_ids = set(sc.ids.tolist())
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:4, 2:4] = True
    densify(sc, np.full((10, 10, 3), 0.5), np.full((10, 10), 2.0),
            Intrinsics(10, 10, 4.5, 4.5), Extrinsics.identity(), 100,
            rng_stream(2, "densify"), mask, birth=3)
    assert np.array_equal(sc.mu[:1], before_mu)
    new_ids = set(sc.ids.tolist()) - old_ids
    assert len(new_ids) == len(sc) - 1
    assert np.all(sc.birth[1:] == 3)


def test_masked_prob_map_fallbacks():
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:3, 1:3] = True
    # zero weights inside the mask fall back to uniform over the mask
    smap = masked_prob_map(np.zeros((5, 5)), mask)
    assert np.allclose(smap.prob[mask], 0.25)
    assert smap.prob.sum() == pytest.approx(1.0)
    # weights outside the mask are ignored
    w = np.ones((5, 5))
    smap2 = masked_prob_map(w, mask)
    assert np.all(smap2.prob[~mask] == 0.0)

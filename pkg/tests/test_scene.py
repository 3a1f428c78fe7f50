from __future__ import annotations

import numpy as np
import pytest

from splat4d.errors import BadMagic, LengthMismatch, NonFiniteData, UnknownId
from splat4d.scene import (MOVING, STILL, GaussianScene, covariance3d,
                           decode_alpha, decode_scale, encode_alpha,
                           encode_scale, split_by_mask)

from conftest import make_scene


def test_covariance_axis_aligned():
    s_log = np.log([1.0, 2.0, 3.0])
    q = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.allclose(covariance3d(s_log, q), np.diag([1.0, 4.0, 9.0]))


def test_covariance_rotated_quarter_turn():
    # 90 deg about z swaps the x/y variances of diag(1, 4, 1)
    s_log = np.log([1.0, 2.0, 1.0])
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    assert np.allclose(covariance3d(s_log, q), np.diag([4.0, 1.0, 1.0]),
                       atol=1e-12)


def test_covariance_symmetric_positive():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s_log = rng.normal(scale=0.7, size=3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        C = covariance3d(s_log, q)
        assert np.allclose(C, C.T)
        assert np.all(np.linalg.eigvalsh(C) > 0)


def test_scale_alpha_codecs():
    s = np.array([[0.1, 1.0, 7.0]])
    assert np.allclose(decode_scale(encode_scale(s)), s)
    a = np.array([0.01, 0.5, 0.99])
    assert np.allclose(decode_alpha(encode_alpha(a)), a)
    assert np.all(decode_alpha(np.array([-50.0, 50.0])) > 0)
    # the logistic saturates to 1.0 in float64; the renderer's opacity
    # cap is what keeps composited alphas below one
    assert np.all(decode_alpha(np.array([-50.0, 50.0])) <= 1)


def test_split_by_mask_all_false_all_true():
    rng = np.random.default_rng(1)
    sc = make_scene(rng, 12)
    pos = rng.uniform(0, 15, (12, 2))
    moving, still = split_by_mask(sc, np.zeros((16, 16), dtype=bool), pos)
    assert len(moving) == 0 and len(still) == 12

    moving, still = split_by_mask(sc, np.ones((16, 16), dtype=bool), pos)
    assert len(moving) == 12 and len(still) == 0


def test_split_by_mask_half_plane():
    rng = np.random.default_rng(2)
    sc = make_scene(rng, 30)
    pos = np.stack([rng.uniform(0, 19, 30), rng.uniform(0, 19, 30)], axis=1)
    mask = np.zeros((20, 20), dtype=bool)
    mask[:, 10:] = True                     # right half-plane
    moving, still = split_by_mask(sc, mask, pos)
    want_moving = np.rint(pos[:, 0]) >= 10
    assert set(moving.tolist()) == set(sc.ids[want_moving].tolist())
    assert set(still.tolist()) == set(sc.ids[~want_moving].tolist())


def test_split_by_mask_off_image_is_still():
    rng = np.random.default_rng(3)
    sc = make_scene(rng, 3)
    pos = np.array([[50.0, 5.0], [-1.0, 2.0], [3.0, 3.0]])
    moving, still = split_by_mask(sc, np.ones((10, 10), dtype=bool), pos)
    assert sc.ids[0] in still and sc.ids[1] in still
    assert sc.ids[2] in moving


def test_append_assigns_fresh_unique_ids():
    rng = np.random.default_rng(4)
    sc = make_scene(rng, 5)
    before = set(sc.ids.tolist())
    new = sc.append(np.zeros((3, 3)) + [0, 0, 5], np.full((3, 3), -2.0),
                    np.zeros(3), np.tile([1.0, 0, 0, 0], (3, 1)),
                    np.full((3, 3), 0.5), cluster=MOVING, birth=7)
    assert len(sc) == 8
    assert len(set(sc.ids.tolist())) == 8
    assert not before & set(new.tolist())
    assert np.all(sc.cluster[-3:] == MOVING)
    assert np.all(sc.birth[-3:] == 7)
    assert np.all(sc.cluster[:5] == STILL)


def test_keep_preserves_ids_of_survivors():
    rng = np.random.default_rng(5)
    sc = make_scene(rng, 6)
    drop = np.array([True, False, True, True, False, True])
    kept_ids = sc.ids[drop].copy()
    sc.keep(drop)
    assert np.array_equal(sc.ids, kept_ids)
    # ids minted after a keep never collide with survivors
    new = sc.append(np.array([[0, 0, 4.0]]), np.full((1, 3), -2.0),
                    np.zeros(1), np.array([[1.0, 0, 0, 0]]),
                    np.full((1, 3), 0.2))
    assert new[0] not in kept_ids


def test_index_of_and_unknown_ids():
    rng = np.random.default_rng(6)
    sc = make_scene(rng, 10)
    sc.keep(np.arange(10) % 2 == 0)          # ids 0,2,4,6,8
    rows = sc.index_of(np.array([4, 0, 8], dtype=np.uint64))
    assert np.array_equal(sc.ids[rows], [4, 0, 8])
    with pytest.raises(UnknownId):
        sc.index_of(np.array([3], dtype=np.uint64))
    assert len(sc.index_of(np.zeros(0, dtype=np.uint64))) == 0
    with pytest.raises(UnknownId):
        GaussianScene.empty().index_of(np.array([0], dtype=np.uint64))


def test_duplicate_ids_rejected():
    with pytest.raises(LengthMismatch):
        GaussianScene(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(2),
                      np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 3)),
                      ids=np.array([5, 5], dtype=np.uint64))


def test_save_load_round_trip_exact(tmp_path):
    rng = np.random.default_rng(7)
    sc = make_scene(rng, 40)
    sc.cluster[::3] = MOVING
    sc.birth[:] = rng.integers(0, 9, 40)
    p = tmp_path / "scene.gfs"
    sc.save(p)
    back = GaussianScene.load(p)
    # geometry columns are stored f32: round trip through f32 is exact
    for name in ("mu", "s_log", "alpha_logit", "q", "color"):
        assert np.array_equal(getattr(back, name),
                              getattr(sc, name).astype(np.float32))
    assert np.array_equal(back.ids, sc.ids)
    assert np.array_equal(back.cluster, sc.cluster)
    assert np.array_equal(back.birth, sc.birth)
    # a second save of the loaded scene is byte-identical
    back.save(tmp_path / "again.gfs")
    assert (tmp_path / "again.gfs").read_bytes() == p.read_bytes()


def test_load_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.gfs"
    p.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(BadMagic):
        GaussianScene.load(p)
    rng = np.random.default_rng(8)
    sc = make_scene(rng, 4)
    q = tmp_path / "trunc.gfs"
    sc.save(q)
    q.write_bytes(q.read_bytes()[:-5])
    with pytest.raises(LengthMismatch):
        GaussianScene.load(q)


def test_save_rejects_non_finite(tmp_path):
    rng = np.random.default_rng(9)
    sc = make_scene(rng, 3)
    sc.mu[1, 2] = np.inf
    with pytest.raises(NonFiniteData):
        sc.save(tmp_path / "nan.gfs")


def test_copy_is_deep():
    rng = np.random.default_rng(10)
    sc = make_scene(rng, 4)
    cp = sc.copy()
    cp.mu[0, 0] += 1.0
    cp.cluster[0] = MOVING
    assert sc.mu[0, 0] != cp.mu[0, 0]
    assert sc.cluster[0] == STILL

from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from splat4d.apps import (PSNR_CAP, TrackSet, concave_hull, edit,
                          extract_tracks, load_run, point_visibility,
                          pose_errors, propagate_mask, psnr, query_point,
                          rasterize_polygon, render_novel_view, ssim,
                          umeyama_alignment)
from splat4d.camera import (Extrinsics, Intrinsics, Trajectory, quat_to_rot,
                            retract)
from splat4d.errors import (DimMismatch, EmptyCluster, LengthMismatch,
                            TooFewPoints, UnknownId)
from splat4d.renderer import render
from splat4d.scene import MOVING, STILL, GaussianScene, covariance3d

from conftest import make_scene, small_camera


# --- scalar metrics ---

def test_psnr_known_value_and_cap():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == PSNR_CAP
    with pytest.raises(DimMismatch):
        psnr(a, b[:4])


def _ssim_reference(x, y):
    def blur(img):
        return gaussian_filter(img, sigma=(1.5, 1.5, 0), truncate=10.0 / 3.0,
                               mode="constant")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    m1, m2 = blur(x), blur(y)
    v1 = blur(x * x) - m1 * m1
    v2 = blur(y * y) - m2 * m2
    cov = blur(x * y) - m1 * m2
    s = ((2 * m1 * m2 + c1) * (2 * cov + c2)) / \
        ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2))
    return float(s.mean())


def test_ssim_matches_reference_and_handles_gray():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(24, 30, 3))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_reference(a, b), abs=1e-9)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    g = rng.uniform(size=(24, 30))
    assert ssim(g, g) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DimMismatch):
        ssim(a, g)


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(40, 3))
    q = rng.normal(size=4)
    R = quat_to_rot(q / np.linalg.norm(q))
    s, t = 1.7, np.array([0.3, -1.2, 2.0])
    dst = s * src @ R.T + t
    se, Re, te = umeyama_alignment(src, dst)
    assert se == pytest.approx(s, abs=1e-9)
    assert np.allclose(Re, R, atol=1e-9)
    assert np.allclose(te, t, atol=1e-9)


# --- pose errors ---

def _random_trajectory(rng, n=6):
    poses = []
    E = Extrinsics.identity()
    for t in range(n):
        poses.append((t, E.copy()))
        E = retract(E, rng.normal(scale=0.05, size=6))
    return Trajectory(poses)


def test_pose_errors_zero_on_identical():
    rng = np.random.default_rng(2)
    traj = _random_trajectory(rng)
    rep = pose_errors(traj, traj)
    assert rep.ate == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(rep.rpe_t, 0.0, atol=1e-12)
    assert np.allclose(rep.rpe_r, 0.0, atol=1e-5)
    assert rep.scale == pytest.approx(1.0, abs=1e-9)


def test_ate_is_similarity_invariant():
    rng = np.random.default_rng(3)
    gt = _random_trajectory(rng, n=8)
    q = rng.normal(size=4)
    R = quat_to_rot(q / np.linalg.norm(q))
    s, t = 0.4, np.array([5.0, -2.0, 1.0])

    est_poses = []
    for f, E in gt.poses:
        c = E.inverse().t
        c2 = s * R @ c + t
        R_w2c = E.rotation()
        est_poses.append((f, Extrinsics.from_rt(R_w2c, -R_w2c @ c2)))
    rep = pose_errors(Trajectory(est_poses), gt)
    assert rep.ate == pytest.approx(0.0, abs=1e-9)
    assert rep.scale == pytest.approx(1.0 / s, rel=1e-6)


def test_rpe_isolates_a_perturbed_step():
    rng = np.random.default_rng(4)
    gt = _random_trajectory(rng, n=5)

    # pure rotation on the last pose: only the final pair sees it,
    # and only in the rotation channel
    ang = np.deg2rad(2.0)
    P_rot = Extrinsics(np.array([np.cos(ang / 2), 0, 0, np.sin(ang / 2)]),
                       np.zeros(3))
    poses = [(f, E.copy()) for f, E in gt.poses]
    poses[-1] = (poses[-1][0], P_rot.compose(poses[-1][1]))
    rep = pose_errors(Trajectory(poses), gt)
    assert np.allclose(rep.rpe_r[:-1], 0.0, atol=1e-5)
    assert rep.rpe_r[-1] == pytest.approx(2.0, abs=1e-9)
    assert rep.rpe_t[-1] == pytest.approx(0.0, abs=1e-12)

    # pure translation likewise lands in the translation channel
    P_tr = Extrinsics(np.array([1.0, 0, 0, 0]), np.array([0.3, 0.0, -0.4]))
    poses = [(f, E.copy()) for f, E in gt.poses]
    poses[-1] = (poses[-1][0], P_tr.compose(poses[-1][1]))
    rep = pose_errors(Trajectory(poses), gt)
    assert np.allclose(rep.rpe_t[:-1], 0.0, atol=1e-12)
    assert rep.rpe_t[-1] == pytest.approx(0.5, abs=1e-9)
    assert rep.rpe_r[-1] == pytest.approx(0.0, abs=1e-5)


def test_pose_errors_guard_frame_coverage():
    rng = np.random.default_rng(5)
    a = _random_trajectory(rng, n=4)
    b = _random_trajectory(rng, n=5)
    with pytest.raises(LengthMismatch):
        pose_errors(a, b)


# --- visibility and queries ---

def _two_stacked_splats():
    K, h, w = small_camera(h=32, w=32, f=40.0)
    mu = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]])
    scene = GaussianScene(mu, np.full((2, 3), np.log(0.15)),
                          np.array([40.0, 40.0]),
                          np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
                          np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    return scene, K, h, w


def test_point_visibility_orders_by_occlusion():
    scene, K, h, w = _two_stacked_splats()
    T = point_visibility(scene, K, Extrinsics.identity(), h, w)
    assert T[0] == pytest.approx(1.0, abs=1e-12)
    assert T[1] < 0.05


def test_query_point_skips_occluded():
    scene, K, h, w = _two_stacked_splats()
    gid = query_point(scene, K, Extrinsics.identity(), h, w,
                      ((w - 1) / 2, (h - 1) / 2))
    assert gid == int(scene.ids[0])


def test_query_point_requires_a_visible_point():
    K, h, w = small_camera(h=16, w=16, f=20.0)
    scene = GaussianScene(np.array([[0.0, 0.0, -3.0]]),
                          np.full((1, 3), np.log(0.1)), np.array([4.0]),
                          np.array([[1.0, 0, 0, 0]]), np.array([[0.5] * 3]))
    with pytest.raises(TooFewPoints):
        query_point(scene, K, Extrinsics.identity(), h, w, (8, 8))


# --- tracking ---

def test_tracks_of_still_points_are_static(tiny_run):
    res = tiny_run["results"]
    seq = tiny_run["seq"]
    common = np.intersect1d(np.intersect1d(res[0].scene.ids,
                                           res[1].scene.ids),
                            res[2].scene.ids)
    ids = common[:5]
    ts = extract_tracks([r.scene for r in res], tiny_run["traj"], seq.K,
                        seq.shape, ids=ids)
    assert len(ts.tracks) == len(ids)
    for tr in ts.tracks:
        assert np.array_equal(tr.frames, [0, 1, 2])
        # Still centers are frozen, so the 3D track is constant
        assert np.allclose(tr.mu, tr.mu[0], atol=1e-12)
        assert tr.uv.shape == (3, 2)


def test_track_starts_at_birth_frame(tiny_run):
    res = tiny_run["results"]
    seq = tiny_run["seq"]
    last = res[-1].scene
    j = int(np.argmax(last.birth))
    gid = int(last.ids[j])
    born = int(last.birth[j])
    ts = extract_tracks([r.scene for r in res], tiny_run["traj"], seq.K,
                        seq.shape, ids=[gid])
    assert ts.tracks[0].frames[0] == born
    assert ts.tracks[0].frames[-1] == 2


def test_track_by_pixel_query_and_csv(tiny_run, tmp_path):
    res = tiny_run["results"]
    seq = tiny_run["seq"]
    h, w = seq.shape
    ts = extract_tracks([r.scene for r in res], tiny_run["traj"], seq.K,
                        seq.shape, pixel=(w / 2, h / 2), frame=0)
    assert len(ts.tracks) == 1
    assert ts.tracks[0].frames[0] == 0
    out = tmp_path / "tracks.csv"
    ts.save_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "id,frame,x,y,z,u,v,visible"
    assert len(lines) == 1 + len(ts.tracks[0].frames)


def test_tracks_unknown_id_raises(tiny_run):
    res = tiny_run["results"]
    seq = tiny_run["seq"]
    with pytest.raises(UnknownId):
        extract_tracks([r.scene for r in res], tiny_run["traj"], seq.K,
                       seq.shape, ids=[2 ** 60])


# --- hulls and mask propagation ---

def test_concave_hull_encloses_points():
    rng = np.random.default_rng(6)
    pts = rng.uniform(2, 28, size=(60, 2))
    poly = concave_hull(pts)
    mask = rasterize_polygon(poly, 32, 32)
    xi = np.round(pts[:, 0]).astype(int)
    yi = np.round(pts[:, 1]).astype(int)
    # every sample pixel is covered (hull vertices lie on the points)
    assert mask[yi, xi].mean() > 0.95
    with pytest.raises(TooFewPoints):
        concave_hull(np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]))


def test_rasterize_square_exact():
    poly = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])
    mask = rasterize_polygon(poly, 8, 8)
    want = np.zeros((8, 8), dtype=bool)
    want[:5, :5] = True
    assert np.array_equal(mask, want)


def test_propagate_mask_follows_static_region(tiny_run):
    res = tiny_run["results"]
    seq = tiny_run["seq"]
    h, w = seq.shape
    initial = np.zeros((h, w), dtype=bool)
    initial[20:44, 30:66] = True
    masks = propagate_mask([r.scene for r in res], tiny_run["traj"], seq.K,
                           seq.shape, initial)
    assert len(masks) == 3

    def iou(a, b):
        return (a & b).sum() / max((a | b).sum(), 1)

    assert iou(masks[0], initial) >= 0.4
    assert iou(masks[1], masks[0]) >= 0.5
    assert iou(masks[2], masks[0]) >= 0.4


def test_propagate_mask_guards(tiny_run):
    res = tiny_run["results"]
    seq = tiny_run["seq"]
    h, w = seq.shape
    with pytest.raises(DimMismatch):
        propagate_mask([r.scene for r in res], tiny_run["traj"], seq.K,
                       seq.shape, np.zeros((h + 1, w), dtype=bool))
    with pytest.raises(TooFewPoints):
        propagate_mask([r.scene for r in res], tiny_run["traj"], seq.K,
                       seq.shape, np.zeros((h, w), dtype=bool))


# --- novel views and edits ---

def test_novel_view_matches_stored_scene(tiny_run):
    seq = tiny_run["seq"]
    E = tiny_run["traj"].extrinsics(1)
    loaded = GaussianScene.load(tiny_run["out"] / "frame_0001.gfs")
    direct = render(loaded, seq.K, E, *seq.shape).color
    via_path = render_novel_view(tiny_run["out"] / "frame_0001.gfs", E,
                                 seq.K, seq.shape)
    assert np.array_equal(direct, via_path)
    # the checkpoint rounds parameters to 32-bit, nothing more
    live = render(tiny_run["results"][1].scene, seq.K, E, *seq.shape).color
    assert psnr(direct, live) > 60.0


def test_novel_view_background_passthrough():
    K, h, w = small_camera(h=16, w=16, f=20.0)
    empty = GaussianScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                          np.zeros((0, 4)), np.zeros((0, 3)))
    img = render_novel_view(empty, Extrinsics.identity(), K, (h, w),
                            background=(1.0, 0.25, 0.0))
    assert np.allclose(img, [1.0, 0.25, 0.0])


def test_edit_identity_and_isolation():
    rng = np.random.default_rng(7)
    scene = make_scene(rng, 30)
    before = scene.copy()
    out = edit(scene)
    assert out is not scene
    assert np.array_equal(out.mu, scene.mu)
    assert np.array_equal(scene.mu, before.mu)

    out = edit(scene, translate=[0.5, 0.0, -0.25])
    assert np.allclose(out.mu, scene.mu + [0.5, 0.0, -0.25])
    assert np.array_equal(out.s_log, scene.s_log)
    assert np.array_equal(scene.mu, before.mu)


def test_edit_rotation_transforms_covariance():
    rng = np.random.default_rng(8)
    scene = make_scene(rng, 12)
    th = np.pi / 2
    R = np.array([[np.cos(th), -np.sin(th), 0],
                  [np.sin(th), np.cos(th), 0],
                  [0, 0, 1.0]])
    out = edit(scene, rotate=R)
    assert np.allclose(out.mu, scene.mu @ R.T, atol=1e-12)
    for i in range(len(scene)):
        want = R @ covariance3d(scene.s_log[i], scene.q[i]) @ R.T
        assert np.allclose(covariance3d(out.s_log[i], out.q[i]), want,
                           atol=1e-10)


def test_edit_scale_moves_log_scales():
    rng = np.random.default_rng(9)
    scene = make_scene(rng, 10)
    out = edit(scene, scale=2.0)
    assert np.allclose(out.mu, 2.0 * scene.mu)
    assert np.allclose(out.s_log, scene.s_log + np.log(2.0))
    with pytest.raises(DimMismatch):
        edit(scene, scale=0.0)


def test_edit_remove_moving_keeps_still():
    rng = np.random.default_rng(10)
    scene = make_scene(rng, 20)
    scene.cluster[::2] = MOVING
    out = edit(scene, select="moving", remove=True)
    keep = scene.cluster == STILL
    assert np.array_equal(out.ids, scene.ids[keep])
    assert np.array_equal(out.mu, scene.mu[keep])
    assert np.all(out.cluster == STILL)


def test_edit_color_affine_clips():
    rng = np.random.default_rng(11)
    scene = make_scene(rng, 10)
    out = edit(scene, color_scale=10.0, color_shift=-0.5)
    assert out.color.min() >= 0.0
    assert out.color.max() <= 1.0


def test_edit_add_appends_unique_ids():
    rng = np.random.default_rng(12)
    a = make_scene(rng, 8)
    b = make_scene(rng, 5)
    out = edit(a, add=b)
    assert len(out) == 13
    assert len(np.unique(out.ids)) == 13
    assert np.array_equal(out.mu[8:], b.mu)


def test_edit_rejects_unknown_selection():
    rng = np.random.default_rng(13)
    scene = make_scene(rng, 6)
    with pytest.raises(UnknownId):
        edit(scene, select="nope")
    with pytest.raises(EmptyCluster):
        edit(scene, select="moving", remove=True)


# --- run loading ---

def test_load_run_round_trip(tiny_run):
    data = load_run(tiny_run["out"])
    assert data.shape == tiny_run["seq"].shape
    assert len(data.scenes) == 3
    assert len(data.trajectory) == 3
    assert np.array_equal(data.scenes[2].mu,
                          tiny_run["results"][2].scene.mu.astype(np.float32))
    for t in range(3):
        assert np.allclose(data.trajectory.extrinsics(t).t,
                           tiny_run["traj"].extrinsics(t).t, atol=1e-12)

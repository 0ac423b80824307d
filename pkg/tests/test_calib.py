from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from radcal.calib import (
    RansacConfig,
    assemble_poses,
    bundle_adjust,
    calibrate,
    evaluate_holdout,
    robust_loss,
    saturation_distance,
    score_distances,
)
from radcal.dataset import Board, Dataset
from radcal.errors import CalibrationFailed, InputError
from radcal.geometry import Pose
from radcal.models import ModelKind
from radcal.synth import generate, preset, spec_for_model, split


@pytest.fixture(scope="module")
def noisy_result(noisy_scene, quick_config):
    return calibrate(noisy_scene.dataset, quick_config)


def test_score_matches_hand_computation():
    d = np.array([0.0, 1.0, 3.0, 10.0])
    ok = np.array([True, True, True, False])
    s = score_distances(d, ok, 2.0, 50.0)
    J = 0.0 + 0.5 + 2 * (3 - 1) + 2 * (50 - 1)
    assert s.robust_loss == pytest.approx(J)
    assert s.rms_weighted == pytest.approx(math.sqrt(2 * J / 4))
    assert s.n_inliers == 2 and s.inlier_ratio == 0.5
    assert s.rms_inlier == pytest.approx(math.sqrt(0.5))


def test_no_inliers_gives_nan_rms():
    s = score_distances(np.array([5.0]), np.array([True]), 2.0, 10.0)
    assert s.n_inliers == 0 and math.isnan(s.rms_inlier)


def test_saturation_is_image_diagonal(fisheye_scene):
    w, h = fisheye_scene.dataset.image_size
    assert saturation_distance(fisheye_scene.dataset) == pytest.approx(math.hypot(w, h))


def test_ground_truth_has_zero_loss(fisheye_scene):
    s = robust_loss(fisheye_scene.truth, fisheye_scene.dataset)
    assert s.robust_loss < 1e-12 and s.inlier_ratio == 1.0


@pytest.mark.parametrize("bad", [dict(sample_size=7), dict(iterations=0), dict(huber_scale=0.0), dict(aspect_samples=(3.0,))])
def test_config_validation(bad):
    with pytest.raises(InputError):
        RansacConfig(**bad)


def test_non_square_config_samples_aspects():
    cfg = RansacConfig.non_square()
    assert len(cfg.aspect_samples) == 16 and cfg.optimize_aspect


def test_assemble_poses_chains_boards():
    rng = np.random.default_rng(3)
    boards = [Board(b, [0, 1, 2, 3], [(0, 0), (1, 0), (0, 1), (1, 1)]) for b in ("A", "B", "C")]
    recs = [(k, b, i, 1.0, 1.0) for k, bs in ((0, "AB"), (1, "BC")) for b in bs for i in range(4)]
    ds = Dataset.from_records(boards, recs)

    def rand_pose():
        q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        return Pose(q * np.sign(np.linalg.det(q)), rng.normal(size=3))

    cams = [rand_pose(), rand_pose()]
    brds = [Pose.identity(), rand_pose(), rand_pose()]
    pairs = {(k, j): cams[k] @ brds[j] for k, j in [(0, 0), (0, 1), (1, 1), (1, 2)]}
    counts = {(k, j): 4 for k in range(2) for j in range(3)}
    cam_R, cam_t, cam_ok, brd_R, brd_t, brd_ok, refs = assemble_poses(ds, pairs, counts)
    assert cam_ok.all() and brd_ok.all() and len(refs) == 1
    ref = brds[refs[0]]
    for k in range(2):
        got = Pose(cam_R[k], cam_t[k])
        want = cams[k] @ ref
        assert np.allclose(got.matrix, want.matrix, atol=1e-9)
    for j in range(3):
        want = ref.inverse() @ brds[j]
        assert np.allclose(Pose(brd_R[j], brd_t[j]).matrix, want.matrix, atol=1e-9)


def test_bundle_adjust_never_increases_loss(noisy_scene):
    truth = noisy_scene.truth
    rng = np.random.default_rng(5)
    start = replace(
        truth,
        intrinsics=replace(truth.intrinsics, f=truth.intrinsics.f * 1.03),
        cam_t=truth.cam_t + rng.normal(0, 0.05, truth.cam_t.shape),
    )
    before = robust_loss(start, noisy_scene.dataset).robust_loss
    for it in (1, 3, 10):
        _, score, info = bundle_adjust(start, noisy_scene.dataset, max_iter=it)
        assert score.robust_loss <= before + 1e-9
        assert info.final_loss <= info.initial_loss
        assert score.robust_loss == pytest.approx(info.final_loss)


def test_noise_free_fisheye_is_recovered(fisheye_scene):
    res = calibrate(fisheye_scene.dataset, RansacConfig(iterations=60), ModelKind.KB)
    cal, truth = res.calibration, fisheye_scene.truth
    assert res.score.rms_weighted < 1e-6
    assert np.allclose(cal.intrinsics.e, truth.intrinsics.e, atol=1e-5)
    assert cal.intrinsics.f == pytest.approx(truth.intrinsics.f, rel=1e-8)
    assert np.allclose(cal.model.params, truth.model.params, atol=1e-7)


def test_calibration_is_deterministic(noisy_scene, quick_config, noisy_result):
    again = calibrate(noisy_scene.dataset, quick_config)
    a, b = noisy_result.calibration, again.calibration
    assert a.model.params == b.model.params
    assert a.intrinsics == b.intrinsics
    assert np.array_equal(a.cam_R, b.cam_R) and np.array_equal(a.cam_t, b.cam_t)
    assert noisy_result.score == again.score


def test_inliers_are_precise(noisy_scene, noisy_result):
    flagged = noisy_result.inliers
    precision = np.mean(~noisy_scene.outliers[flagged])
    assert precision >= 0.99
    # every labelled outlier in this scene is far away: none should pass
    assert noisy_result.score.inlier_ratio <= 1 - noisy_scene.outliers.mean() + 1e-9


def test_initial_score_not_better_than_final(noisy_result):
    assert noisy_result.initial_score is not None
    assert noisy_result.score.robust_loss <= noisy_result.initial_score.robust_loss + 1e-9


def test_clean_proposal_explains_every_corner(fisheye_scene):
    res = calibrate(fisheye_scene.dataset, RansacConfig(iterations=1))
    assert res.initial_score.inlier_ratio > 0.99


def test_doubled_aspect_is_rejected_by_capture_score(fisheye_scene):
    # one planar view barely constrains the aspect, the whole capture does
    right = calibrate(fisheye_scene.dataset, RansacConfig(iterations=10, ba_iterations=0, lo_iterations=0))
    wrong = calibrate(fisheye_scene.dataset, RansacConfig(iterations=10, aspect_samples=(2.0,), ba_iterations=0, lo_iterations=0))
    assert wrong.initial_score.inlier_ratio < 0.9 < right.initial_score.inlier_ratio


def test_too_few_correspondences_fail():
    b = Board("A", list(range(4)), [(0, 0), (1, 0), (0, 1), (1, 1)])
    ds = Dataset.from_records([b], [(0, "A", i, 10.0 * i, 5.0 * i) for i in range(4)])
    with pytest.raises(CalibrationFailed):
        calibrate(ds)


def test_holdout_on_truth_is_exact(fisheye_scene):
    train, test = split(fisheye_scene.dataset, 0.34)
    truth = fisheye_scene.truth
    h = evaluate_holdout(truth.model, truth.intrinsics, test)
    assert not h.failures
    assert h.score.rms_weighted < 1e-6


def test_holdout_warm_start_wins_and_clears_failures(fisheye_scene):
    truth = fisheye_scene.truth
    ds = fisheye_scene.dataset
    init = truth.camera_poses
    h = evaluate_holdout(truth.model, truth.intrinsics, ds, init_poses=init)
    assert not h.failures and h.score.rms_weighted < 1e-6


def test_holdout_rejects_unknown_board(fisheye_scene):
    truth = fisheye_scene.truth
    two = [fisheye_scene.dataset.boards[0], Board("other", [0, 1, 2, 3], [(0, 0), (1, 0), (0, 1), (1, 1)])]
    recs = fisheye_scene.dataset.records() + [(0, "other", 0, 1.0, 1.0)]
    ds = Dataset.from_records(two, recs, fisheye_scene.dataset.image_size)
    with pytest.raises(InputError, match="other"):
        evaluate_holdout(truth.model, truth.intrinsics, ds, board_poses=truth.board_poses)


def test_compose_pose_matches_matrix_product(rng):
    from radcal.calib import compose_pose

    a = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    b = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    assert np.allclose(compose_pose(a, b).matrix, a.matrix @ b.matrix, atol=1e-14)
    assert np.allclose(compose_pose(a, Pose.identity()).matrix, a.matrix, atol=1e-15)
    assert np.allclose(compose_pose(Pose.identity(), b).matrix, b.matrix, atol=1e-15)


def test_inlier_ratio_at_truth_with_ten_percent_outliers():
    scene = generate(preset("wide", n_images=8, outlier_fraction=0.1, rng_seed=21))
    s = robust_loss(scene.truth, scene.dataset)
    assert 0.88 <= s.inlier_ratio <= 0.92
    # independent evaluation of the inlier ratio
    from radcal.models import project_points

    ds, t = scene.dataset, scene.truth
    P = np.einsum("mij,mj->mi", t.cam_R[ds.img], ds.X) + t.cam_t[ds.img]
    pix, status = project_points(t.model, t.intrinsics, P)
    d = np.hypot(*(pix - ds.uv).T)
    assert s.inlier_ratio == np.mean((status == 0) & (d <= 2.0))


def test_outlier_only_sample_never_crashes():
    from radcal.calib import _context, propose_model
    from radcal.errors import ProposalFailed

    scene = generate(preset("wide", n_images=3, outlier_fraction=0.3, rng_seed=4))
    ds = scene.dataset
    ctx = _context(ds, ModelKind.DIV_EVEN)
    cfg = RansacConfig()
    key = (0, 0)
    idx = ctx.groups[key]
    bad = idx[scene.outliers[idx]][:14]
    assert len(bad) == 14
    try:
        cal = propose_model(ctx, key, bad, 1.0, cfg, np.random.default_rng(0))
    except ProposalFailed:
        return
    assert robust_loss(cal, ds).inlier_ratio < 0.5


def test_bundle_adjust_at_truth_is_stationary(fisheye_scene):
    _, score, info = bundle_adjust(fisheye_scene.truth, fisheye_scene.dataset)
    assert score.robust_loss == info.initial_loss < 1e-20


def test_bundle_adjust_recovers_perturbed_truth(fisheye_scene):
    truth = fisheye_scene.truth
    kick = Pose.from_rotvec(np.radians([0.5, 0.0, 0.0]), np.zeros(3))
    start = replace(
        truth,
        intrinsics=replace(truth.intrinsics, f=truth.intrinsics.f * 1.01),
        cam_R=np.einsum("ij,kjl->kil", kick.R, truth.cam_R),
    )
    cal, score, _ = bundle_adjust(start, fisheye_scene.dataset)
    assert score.rms_weighted < 1e-6
    assert cal.intrinsics.f == pytest.approx(truth.intrinsics.f, rel=1e-6)
    assert np.allclose(cal.intrinsics.e, truth.intrinsics.e, atol=1e-6)
    assert np.allclose(cal.cam_R, truth.cam_R, atol=1e-6)


def test_holdout_with_truth_matches_training_score(fisheye_scene):
    truth, ds = fisheye_scene.truth, fisheye_scene.dataset
    h = evaluate_holdout(truth.model, truth.intrinsics, ds)
    assert h.score.robust_loss == pytest.approx(robust_loss(truth, ds).robust_loss, abs=1e-12)


def test_holdout_rms_reflects_noise_and_wrong_focal():
    # close boards span the field; far ones let the pose absorb a focal error
    scene = generate(preset("wide", n_images=6, noise_sigma=0.5, rng_seed=8, distance=(0.7, 1.5)))
    truth, ds = scene.truth, scene.dataset
    good = evaluate_holdout(truth.model, truth.intrinsics, ds).score.rms_weighted
    # distances are 2-D, so their RMS is sqrt(2) sigma for isotropic noise
    assert good == pytest.approx(0.5 * math.sqrt(2), rel=0.2)
    wrong = replace(truth.intrinsics, f=1.5 * truth.intrinsics.f)
    assert evaluate_holdout(truth.model, wrong, ds).score.rms_weighted >= 3 * good


def test_best_loss_history_never_increases(noisy_result):
    losses = [h[1] if isinstance(h, tuple) else h for h in noisy_result.history]
    assert losses and all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_record_order_does_not_matter(noisy_scene, quick_config, noisy_result):
    recs = noisy_scene.dataset.records()
    perm = np.random.default_rng(0).permutation(len(recs))
    ds = Dataset.from_records(noisy_scene.dataset.boards, [recs[i] for i in perm], noisy_scene.dataset.image_size)
    again = calibrate(ds, quick_config)
    assert again.calibration.model.params == noisy_result.calibration.model.params
    assert again.score == noisy_result.score


def test_two_board_rig_is_recovered():
    scene = generate(spec_for_model(ModelKind.DIV_EVEN, n_boards=2, n_images=4, rng_seed=2))
    res = calibrate(scene.dataset, RansacConfig(iterations=20))
    assert res.score.rms_weighted < 1e-6
    cal, truth = res.calibration, scene.truth
    ref = cal.references[0]
    got = {b: p for b, p in cal.board_poses.items()}
    want = {b: p for b, p in truth.board_poses.items()}
    for b in got:
        rel_got = got[ref].inverse() @ got[b]
        rel_want = want[ref].inverse() @ want[b]
        assert np.allclose(rel_got.matrix, rel_want.matrix, atol=1e-8)


def test_square_pixels_stay_square(fisheye_scene, noisy_result):
    assert noisy_result.calibration.intrinsics.a == 1.0

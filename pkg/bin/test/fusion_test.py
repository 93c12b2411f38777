import numpy as np
import pytest

from lib.errors import DimensionMismatch, InsufficientMatches, ParseError
from lib.events import E3CT, StereoE3CT
from lib.fusion import (FrameStatistics, FusionConfig, FusionMode, FusionStage, calibrate_alignment, collapse_tensor,
                        frame_statistics, fuse, map_event_pixels, read_match_file, select_beta, warp_e3ct)
from lib.geometry import PinholeCamera, Pose, RigCalibration, Side

CAM = PinholeCamera(fx=100.0, fy=100.0, cx=20.0, cy=15.0, width=40, height=30)


def make_rig(t_cd=None, align=(0.0, 0.0), dvs=CAM):
    t_cd = t_cd or Pose.identity()
    return RigCalibration(cam_left=CAM, cam_right=CAM, dvs_left=dvs, dvs_right=dvs, T_cd_left=t_cd,
                          T_cd_right=t_cd, T_lr=Pose(np.eye(3), [-0.1, 0, 0]), align_left=align,
                          align_right=align)


@pytest.fixture(name='tensor')
def fixture_tensor():
    rng = np.random.default_rng(0)
    return E3CT((rng.random((3, 30, 40)) < 0.2).astype(float), 1.0)


@pytest.mark.parametrize('depth', [0.5, 3.0, 40.0])
def test_should_leave_tensor_unchanged_for_identity_rig(tensor, depth):
    np.testing.assert_array_equal(warp_e3ct(tensor, make_rig(), Side.LEFT, depth), tensor.channels)


def test_should_shift_by_alignment_offset(tensor):
    warped = warp_e3ct(tensor, make_rig(align=(5.0, -3.0)), Side.RIGHT, 2.0)
    np.testing.assert_array_equal(warped[:, :27, 5:], tensor.channels[:, 3:, :35])
    assert not warped[:, :, :5].any()
    assert not warped[:, 27:, :].any()


def test_should_place_events_at_frame_projections():
    dvs = PinholeCamera(fx=90.0, fy=92.0, cx=19.0, cy=16.0, width=40, height=30)
    t_cd = Pose.from_rotvec([0.0, 0.01, 0.0], [0.02, -0.01, 0.0])
    rig = make_rig(t_cd=t_cd, dvs=dvs)
    depth = 2.5
    rng = np.random.default_rng(1)
    pixels = np.column_stack([rng.integers(8, 32, 20), rng.integers(8, 22, 20)])
    for u, v in pixels:
        tensor = E3CT.zeros((30, 40), 0.0)
        tensor.channels[:, v, u] = 1.0
        point = dvs.unproject(np.array([u, v], dtype=float), depth)
        expected = CAM.project_camera(t_cd.transform(point))
        warped = warp_e3ct(tensor, rig, Side.LEFT, depth)
        row, col = np.argwhere(warped[0] > 0)[0]
        assert abs(col - expected[0]) <= 0.5
        assert abs(row - expected[1]) <= 0.5


def test_should_map_pixels_continuously():
    rig = make_rig(align=(1.5, 2.5))
    target, ahead = map_event_pixels(CAM, CAM, Pose.identity(), rig.align_left, np.array([[3.0, 4.0]]), 2.0)
    assert ahead.all()
    np.testing.assert_allclose(target, [[4.5, 6.5]])


def test_should_keep_mass_with_bilinear_splat():
    tensor = E3CT.zeros((30, 40), 0.0)
    tensor.channels[:, 10, 10] = 1.0
    warped = warp_e3ct(tensor, make_rig(align=(0.25, 0.5)), Side.LEFT, 2.0, bilinear=True)
    assert warped[0].sum() == pytest.approx(1.0)
    assert warped[0, 10, 10] == pytest.approx(0.75 * 0.5)


def test_should_recover_table_offset():
    rng = np.random.default_rng(2)
    warped = rng.uniform(0, 640, (30, 2))
    estimate = calibrate_alignment(warped + [-160, -235], warped)
    np.testing.assert_allclose(estimate.offset, [-160, -235])
    assert estimate.rms == pytest.approx(0.0, abs=1e-9)


def test_should_recover_zero_offset():
    warped = np.arange(40, dtype=float).reshape(20, 2)
    np.testing.assert_allclose(calibrate_alignment(warped, warped).offset, [0, 0])


def test_should_recover_noisy_offset_within_three_sigma():
    rng = np.random.default_rng(3)
    n = 400
    warped = rng.uniform(0, 640, (n, 2))
    frame = warped + [355, 40] + rng.normal(0, 1.0, (n, 2))
    estimate = calibrate_alignment(frame, warped)
    assert np.all(np.abs(estimate.offset - [355, 40]) < 3.0 / np.sqrt(n))
    assert estimate.rms == pytest.approx(np.sqrt(2.0), rel=0.15)


def test_should_need_ten_matches():
    with pytest.raises(InsufficientMatches, match="at least 10"):
        calibrate_alignment(np.zeros((9, 2)), np.zeros((9, 2)))


def test_should_read_match_file(tmp_path):
    path = tmp_path / 'matches.csv'
    path.write_text("fx,fy,ex,ey\n10,20,1,2\n30,40.5,3,4\n")
    frame, events = read_match_file(path)
    np.testing.assert_allclose(frame, [[10, 20], [30, 40.5]])
    np.testing.assert_allclose(events, [[1, 2], [3, 4]])
    path.write_text("fx,fy,ex,ey\n10,20,1\n")
    with pytest.raises(ParseError, match=":2:"):
        read_match_file(path)


def test_should_use_min_rule_in_aps_mode():
    beta, mode = select_beta(FrameStatistics(0.1, 1.0), 100, FusionConfig(beta_cap=1.0))
    assert mode == FusionMode.APS_BIASED
    assert beta == pytest.approx(0.1)


def test_should_cap_max_rule_in_dvs_mode():
    beta, mode = select_beta(FrameStatistics(0.1, 1.0), 10, FusionConfig(beta_cap=0.3))
    assert mode == FusionMode.DVS_BIASED
    assert beta == pytest.approx(0.3)


def test_should_agree_at_midpoint():
    cfg = FusionConfig(beta_cap=1.0)
    assert select_beta(FrameStatistics(0.5, 1.0), 0, cfg)[0] == pytest.approx(0.5)
    assert select_beta(FrameStatistics(0.5, 1.0), 1000, cfg)[0] == pytest.approx(0.5)


def test_should_follow_pointwise_rule_without_hysteresis():
    cfg = FusionConfig()
    counts = [49, 50, 51, 49, 48, 50, 52, 10, 50, 49]
    modes = [select_beta(FrameStatistics(0.3, 0.9), c, cfg)[1] for c in counts]
    assert modes == [FusionMode.DVS_BIASED if c < 50 else FusionMode.APS_BIASED for c in counts]


def test_should_return_frame_for_zero_beta():
    rng = np.random.default_rng(4)
    frame = rng.random((30, 40))
    np.testing.assert_array_equal(fuse(frame, rng.random((30, 40)), 0.0), frame)


def test_should_return_events_for_unit_beta():
    rng = np.random.default_rng(5)
    events = rng.random((30, 40))
    np.testing.assert_allclose(fuse(rng.random((30, 40)), events, 1.0), events)


def test_should_blend_constant_images():
    np.testing.assert_allclose(fuse(np.full((4, 4), 0.4), np.full((4, 4), 0.8), 0.3), 0.52)


def test_should_move_toward_events_as_beta_grows():
    frame, events = np.full((2, 2), 0.2), np.full((2, 2), 0.9)
    blended = [fuse(frame, events, b)[0, 0] for b in np.linspace(0, 1, 11)]
    assert all(a < b for a, b in zip(blended, blended[1:]))


def test_should_reject_mismatched_shapes():
    with pytest.raises(DimensionMismatch):
        fuse(np.zeros((3, 3)), np.zeros((3, 4)), 0.2)


def test_should_report_frame_statistics_and_collapse_channels():
    stats = frame_statistics(np.array([[0.0, 1.0]]), np.array([[0.5, 0.5]]))
    assert stats == FrameStatistics(0.5, 1.0)
    np.testing.assert_allclose(collapse_tensor(np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2))])),
                               np.full((2, 2), 2 / 3))


def test_should_force_frames_only_when_images_only(tensor):
    stage = FusionStage(make_rig(), FusionConfig(images_only=True))
    frame = np.full((30, 40), 0.25)
    fused = stage.process(frame, frame, StereoE3CT(tensor, tensor, 1.0, (1, 1)), 1.0, feature_count=0)
    assert fused.beta == 0.0
    np.testing.assert_array_equal(fused.image_left, frame)
    assert fused.events_left is None and fused.events_right is None


def test_should_blend_events_in_dvs_mode(tensor):
    stage = FusionStage(make_rig(), FusionConfig())
    frame = np.zeros((30, 40))
    frame[0, 0] = 1.0
    fused = stage.process(frame, frame, StereoE3CT(tensor, tensor, 1.0, (1, 1)), 1.0, feature_count=0)
    assert fused.mode == FusionMode.DVS_BIASED
    assert fused.beta == pytest.approx(0.3)
    assert np.all(fused.image_left >= 0) and np.all(fused.image_left <= 1)
    assert stage.mode_counts[FusionMode.DVS_BIASED] == 1


def test_should_keep_event_images_beside_blended_frames(tensor):
    stage = FusionStage(make_rig(), FusionConfig())
    frame = np.zeros((30, 40))
    fused = stage.process(frame, frame, StereoE3CT(tensor, tensor, 1.0, (1, 1)), 1.0, feature_count=0)
    assert fused.events_left.shape == fused.events_right.shape == frame.shape
    np.testing.assert_allclose(fused.image_left, fuse(frame, fused.events_left, fused.beta))
    np.testing.assert_allclose(fused.image_right, fuse(frame, fused.events_right, fused.beta))

import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lib.errors import DegenerateConfiguration, NoAssociations
from lib.evaluation import (AlignmentMode, aligned_positions, associate, ate, evaluate, rpe, umeyama_align,
                            write_report)
from lib.geometry import Pose
from lib.trajectory import TrajectoryRecord


def wiggle(count=40, period=0.05):
    records = []
    for k in range(count):
        t = k * period
        position = [np.sin(t), 0.3 * np.cos(2 * t), 0.5 * t]
        records.append(TrajectoryRecord(t, Pose.from_rotvec([0.0, 0.1 * t, 0.02 * k], position)))
    return records


def moved(records, transform, scale=1.0, time_offset=0.0):
    return [TrajectoryRecord(r.timestamp + time_offset,
                             transform.compose(Pose(r.pose.rotation, scale * r.pose.translation)))
            for r in records]


@pytest.fixture(name='cloud')
def fixture_cloud():
    return np.random.default_rng(0).normal(size=(25, 3))


def test_should_align_identical_sets_to_identity(cloud):
    alignment = umeyama_align(cloud, cloud, with_scale=True)
    assert alignment.scale == pytest.approx(1.0)
    np.testing.assert_allclose(alignment.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(alignment.translation, 0.0, atol=1e-12)


def test_should_recover_known_rigid_motion(cloud):
    rotation = Rotation.from_rotvec(np.radians(30) * np.array([0.0, 0.0, 1.0])).as_matrix()
    alignment = umeyama_align(cloud, cloud @ rotation.T + [1.0, 2.0, 3.0])
    np.testing.assert_allclose(alignment.rotation, rotation, atol=1e-12)
    np.testing.assert_allclose(alignment.translation, [1.0, 2.0, 3.0], atol=1e-12)
    assert alignment.scale == 1.0


def test_should_recover_scale_only_when_asked(cloud):
    target = 2.5 * cloud + [0.0, 1.0, 0.0]
    assert umeyama_align(cloud, target, with_scale=True).scale == pytest.approx(2.5)
    assert umeyama_align(cloud, target).scale == 1.0


def test_should_agree_with_direct_svd_solution(cloud):
    rng = np.random.default_rng(1)
    target = cloud @ Rotation.from_rotvec([0.4, -1.1, 0.7]).as_matrix().T + rng.normal(scale=0.05, size=cloud.shape)
    alignment = umeyama_align(cloud, target)
    # orthogonal Procrustes on the centred sets
    a, b = cloud - cloud.mean(axis=0), target - target.mean(axis=0)
    u, _, vt = np.linalg.svd(b.T @ a)
    expected = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    np.testing.assert_allclose(alignment.rotation, expected, atol=1e-10)
    assert np.linalg.det(alignment.rotation) == pytest.approx(1.0)


def test_should_refuse_collinear_points():
    line = np.outer(np.arange(6.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateConfiguration, match='collinear'):
        umeyama_align(line, line + 1.0)


def test_should_refuse_too_few_points(cloud):
    with pytest.raises(DegenerateConfiguration, match='at least 3'):
        umeyama_align(cloud[:2], cloud[:2])


def test_should_associate_within_window():
    estimate = [TrajectoryRecord(t, Pose.identity()) for t in (0.0, 0.104, 0.2, 0.35)]
    truth = [TrajectoryRecord(t, Pose.identity()) for t in (0.001, 0.1, 0.2, 0.3)]
    assert associate(estimate, truth).tolist() == [[0, 0], [1, 1], [2, 2]]


def test_should_use_each_ground_truth_pose_once():
    estimate = [TrajectoryRecord(t, Pose.identity()) for t in (0.098, 0.1, 0.103)]
    truth = [TrajectoryRecord(0.1, Pose.identity())]
    assert associate(estimate, truth).tolist() == [[1, 0]]


def test_should_report_zero_error_on_ground_truth():
    truth = wiggle()
    result = ate(truth, truth)
    assert result.rmse == pytest.approx(0.0, abs=1e-12)
    assert result.n_pairs == len(truth)
    assert rpe(truth, truth).rmse == pytest.approx(0.0, abs=1e-12)


def test_should_ignore_rigid_offset_of_estimate():
    truth = wiggle()
    estimate = moved(truth, Pose.from_rotvec([0.3, -0.2, 1.0], [5.0, -1.0, 2.0]), time_offset=0.004)
    assert ate(estimate, truth).rmse == pytest.approx(0.0, abs=1e-9)
    assert rpe(estimate, truth).rmse == pytest.approx(0.0, abs=1e-9)


def test_should_need_similarity_for_scaled_estimate():
    truth = wiggle()
    estimate = moved(truth, Pose.identity(), scale=0.5)
    assert ate(estimate, truth, AlignmentMode.SIM3).rmse == pytest.approx(0.0, abs=1e-9)
    assert ate(estimate, truth, AlignmentMode.SE3).rmse > 0.05


def test_should_compute_rmse_of_known_residuals():
    positions = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    truth = [TrajectoryRecord(float(k), Pose(np.eye(3), p)) for k, p in enumerate(positions)]
    # opposite vertical offsets cannot be aligned away
    offsets = np.array([[0, 0, 0.1], [0, 0, -0.1], [0, 0, -0.1], [0, 0, 0.1]])
    estimate = [TrajectoryRecord(float(k), Pose(np.eye(3), p + o)) for k, (p, o) in enumerate(zip(positions, offsets))]
    result = ate(estimate, truth)
    assert result.rmse == pytest.approx(0.1)
    assert result.max == pytest.approx(0.1)
    assert result.std == pytest.approx(0.0, abs=1e-12)


def test_should_measure_constant_drift_per_step():
    truth = wiggle()
    drift = np.array([0.01, 0.0, 0.02])
    estimate = [TrajectoryRecord(r.timestamp, Pose(r.pose.rotation, r.pose.translation + k * drift))
                for k, r in enumerate(truth)]
    result = rpe(estimate, truth)
    assert result.rmse == pytest.approx(np.linalg.norm(drift))
    assert result.std == pytest.approx(0.0, abs=1e-12)
    assert result.n_pairs == len(truth) - 1
    assert rpe(estimate, truth, delta=4).rmse == pytest.approx(4 * np.linalg.norm(drift))


def test_should_fail_without_overlapping_timestamps():
    truth = wiggle()
    with pytest.raises(NoAssociations, match='within 10 ms'):
        ate(moved(truth, Pose.identity(), time_offset=100.0), truth)


def test_should_reject_invalid_delta():
    with pytest.raises(ValueError, match='at least 1'):
        rpe(wiggle(), wiggle(), delta=0)


def test_should_write_sorted_report(tmp_path):
    truth = wiggle()
    report = evaluate(truth, truth, AlignmentMode.SIM3)
    write_report(report, tmp_path / 'report.json')
    loaded = json.loads((tmp_path / 'report.json').read_text())
    assert list(loaded) == sorted(loaded)
    assert loaded['mode'] == 'sim3'
    assert loaded['n_pairs'] == 40
    assert {'ate_rmse', 'ate_median', 'rpe_rmse', 'rpe_delta'} <= set(loaded)


def test_should_return_aligned_positions():
    truth = wiggle()
    estimate = moved(truth, Pose(np.eye(3), [1.0, 0.0, 0.0]))
    aligned, reference = aligned_positions(estimate, truth)
    np.testing.assert_allclose(aligned, reference, atol=1e-9)

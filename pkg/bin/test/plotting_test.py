import numpy as np
import pytest

from lib.errors import DataError
from lib.geometry import Pose
from lib.plotting import gap_segments, plot_trajectories, read_cloud, save_tensor_image
from lib.trajectory import TrajectoryRecord


def test_should_split_path_at_tracking_gaps():
    stamps = np.array([0.0, 0.1, 0.2, 0.9, 1.0, 1.1])
    xyz = np.arange(18, dtype=float).reshape(6, 3)
    segments = gap_segments(stamps, xyz)
    assert [len(s) for s in segments] == [3, 3]
    np.testing.assert_array_equal(segments[1][0], xyz[3])


def test_should_keep_single_pose_whole():
    xyz = np.zeros((1, 3))
    assert len(gap_segments(np.zeros(1), xyz)) == 1


def test_should_read_positions_from_map_dump(tmp_path):
    path = tmp_path / 'map.txt'
    path.write_text('1 2 3 255 0 0\n4 5 6 0 255 0\n')
    np.testing.assert_array_equal(read_cloud(path), [[1, 2, 3], [4, 5, 6]])
    path.write_text('')
    assert read_cloud(path).shape == (0, 3)


def test_should_refuse_missing_map_dump(tmp_path):
    with pytest.raises(DataError, match="Map file .* not found"):
        read_cloud(tmp_path / 'absent.txt')


def test_should_write_images(tmp_path):
    records = [TrajectoryRecord(0.1 * k, Pose(np.eye(3), [k, k % 3, 0.0])) for k in range(8)]
    plot_trajectories(tmp_path / 'path.png', records, points=np.random.default_rng(0).normal(size=(50, 3)))
    save_tensor_image(np.random.default_rng(1).uniform(size=(3, 12, 16)), tmp_path / 'tensor.png')
    assert (tmp_path / 'path.png').stat().st_size > 0
    assert (tmp_path / 'tensor.png').stat().st_size > 0

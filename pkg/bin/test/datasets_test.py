import numpy as np
import pytest
from matplotlib import image as mpimg

from lib.calibration import dump_calibration
from lib.datasets import TumVieSequence, VectorSequence, open_sequence, read_timestamps
from lib.errors import CalibrationError, ConfigError, DataError, ParseError
from lib.events import make_events, write_events_binary, write_events_csv
from lib.geometry import Pose
from lib.simulator import default_rig
from lib.trajectory import TrajectoryRecord, write_tum

FRAMES = 3


def gradient(k):
    return np.tile(np.linspace(0.0, 1.0, 16), (12, 1)) * (k + 1) / FRAMES


def write_images(folder, count=FRAMES):
    folder.mkdir()
    for k in range(count):
        mpimg.imsave(folder / f'{k:06d}.png', gradient(k), cmap='gray', vmin=0.0, vmax=1.0)


@pytest.fixture(name='tum_vie')
def fixture_tum_vie(tmp_path):
    dump_calibration(default_rig(), tmp_path / 'calibration.yaml')
    write_images(tmp_path / 'left_images')
    write_images(tmp_path / 'right_images')
    (tmp_path / 'image_timestamps_left.txt').write_text('1000000\n1050000\n1100000\n')
    events = make_events([1_010_000_000, 1_020_000_000], [3, 4], [5, 6], [1, -1])
    write_events_binary(events, tmp_path / 'events_left.bin')
    write_events_csv(events, tmp_path / 'events_right.csv')
    write_tum([TrajectoryRecord(1_000_000.0, Pose.identity()), TrajectoryRecord(1_100_000.0, Pose.identity())],
              tmp_path / 'mocap-6dof.txt')
    return tmp_path


def test_should_read_tum_vie_layout(tum_vie):
    sequence = open_sequence('tum-vie', tum_vie)
    assert isinstance(sequence, TumVieSequence)
    np.testing.assert_allclose(sequence.frame_times, [1.0, 1.05, 1.1])
    left, right = sequence.frames(1)
    assert left.shape == (12, 16)
    np.testing.assert_allclose(left, gradient(1), atol=2.0 / 255)
    np.testing.assert_array_equal(left, right)
    truth = sequence.ground_truth()
    assert [r.timestamp for r in truth] == pytest.approx([1.0, 1.1])


def test_should_read_binary_and_csv_events_alike(tum_vie):
    left, right = open_sequence('tum-vie', tum_vie).event_streams()
    window = (1_000_000_000, 1_100_000_000)
    np.testing.assert_array_equal(left.slice(*window), right.slice(*window))
    assert len(left.slice(*window)) == 2


def test_should_read_vector_layout(tmp_path):
    dump_calibration(default_rig(), tmp_path / 'calibration.yaml')
    write_images(tmp_path / 'left_camera')
    write_images(tmp_path / 'right_camera')
    (tmp_path / 'left_camera_timestamps.txt').write_text('# seconds\n0.0\n0.1\n0.2\n')
    write_events_csv(make_events([5_000_000], [1], [1]), tmp_path / 'left_event.csv')
    write_events_csv(make_events([6_000_000], [2], [2]), tmp_path / 'right_event.csv')
    sequence = open_sequence('vector', tmp_path)
    assert isinstance(sequence, VectorSequence)
    assert len(sequence) == FRAMES
    assert sequence.ground_truth() is None
    left, _ = sequence.events()
    assert left['t'].tolist() == [5_000_000]


def test_should_refuse_unknown_adapter(tmp_path):
    with pytest.raises(ConfigError, match="Unknown dataset adapter 'kitti'"):
        open_sequence('kitti', tmp_path)


def test_should_refuse_missing_directory(tmp_path):
    with pytest.raises(DataError, match="not found"):
        open_sequence('simulator', tmp_path / 'nowhere')


def test_should_refuse_missing_calibration(tmp_path):
    with pytest.raises(CalibrationError, match="not found"):
        open_sequence('simulator', tmp_path)


def test_should_refuse_image_count_mismatch(tum_vie):
    (tum_vie / 'left_images' / '000002.png').unlink()
    with pytest.raises(DataError, match="2 images but there are 3 timestamps"):
        open_sequence('tum-vie', tum_vie)


def test_should_refuse_missing_event_file(tum_vie):
    (tum_vie / 'events_right.csv').unlink()
    with pytest.raises(DataError, match="No event file events_right"):
        open_sequence('tum-vie', tum_vie).events()


def test_should_report_bad_timestamp_line(tmp_path):
    path = tmp_path / 'times.txt'
    path.write_text('0.0\nsoon\n')
    with pytest.raises(ParseError, match=':2: not a timestamp'):
        read_timestamps(path)

import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from lib.calibration import dump_calibration, load_calibration
from lib.cli import cli, parse_settings
from lib.datasets import open_sequence
from lib.errors import ConfigError
from lib.geometry import Pose
from lib.simulator import TrajectoryKind, TrajectorySpec, default_rig, make_scene, simulate, write_sequence
from lib.trajectory import TrajectoryRecord, write_tum


def invoke(tmp_path, *args):
    return CliRunner().invoke(cli, ['--log', str(tmp_path / 'cli.log'), *[str(a) for a in args]])


@pytest.fixture(name='sequence_dir', scope='module')
def fixture_sequence_dir(tmp_path_factory):
    spec = make_scene(TrajectorySpec(TrajectoryKind.LINE, duration=0.4, rate=20.0, amplitude=0.05), landmark_count=30)
    return write_sequence(simulate(spec), tmp_path_factory.mktemp('line'))


@pytest.fixture(name='trajectory')
def fixture_trajectory(tmp_path):
    records = [TrajectoryRecord(0.1 * k, Pose.from_rotvec([0.0, 0.05 * k, 0.0], [np.cos(k), np.sin(k), 0.1 * k]))
               for k in range(12)]
    path = tmp_path / 'trajectory.txt'
    write_tum(records, path)
    return path


def test_should_read_settings_as_yaml_scalars():
    assert parse_settings(['fusion.beta_cap=0', 'loop_closure.enabled=false', 'output_dir=runs/a']) == {
        'fusion.beta_cap': 0, 'loop_closure.enabled': False, 'output_dir': 'runs/a'}


def test_should_refuse_setting_without_value():
    with pytest.raises(ConfigError, match="must look like section.key=value"):
        parse_settings(['fusion.beta_cap'])


def test_should_exit_with_config_code_for_missing_dataset(tmp_path):
    result = invoke(tmp_path, 'run', '--dataset', tmp_path / 'nowhere')
    assert result.exit_code == 2
    assert 'not found' in (tmp_path / 'cli.log').read_text()


def test_should_exit_with_config_code_for_bad_setting(tmp_path, sequence_dir):
    result = invoke(tmp_path, 'run', '--dataset', sequence_dir, '--set', 'tracking.min_inliers=many')
    assert result.exit_code == 2
    assert 'tracking.min_inliers must be an integer' in (tmp_path / 'cli.log').read_text()


def test_should_exit_with_data_code_for_malformed_trajectory(tmp_path, trajectory):
    bad = tmp_path / 'bad.txt'
    bad.write_text('0.0 1 2 3\n')
    result = invoke(tmp_path, 'eval', bad, trajectory)
    assert result.exit_code == 3


def test_should_report_zero_error_for_identical_trajectories(tmp_path, trajectory):
    report = tmp_path / 'report.json'
    result = invoke(tmp_path, 'eval', trajectory, trajectory, '--mode', 'sim3', '--delta', 2, '--report', report,
                    '--plot', tmp_path / 'aligned.png')
    assert result.exit_code == 0, result.output
    metrics = json.loads(report.read_text())
    assert metrics['ate_rmse'] == pytest.approx(0.0, abs=1e-9)
    assert metrics['rpe_rmse'] == pytest.approx(0.0, abs=1e-9)
    assert metrics['mode'] == 'sim3'
    assert metrics['rpe_delta'] == 2
    assert (tmp_path / 'aligned.png').stat().st_size > 0
    assert 'ate_rmse' in result.output


def test_should_simulate_readable_sequence(tmp_path):
    result = invoke(tmp_path, 'simulate', tmp_path / 'sim', '--trajectory', 'circle', '--duration', 0.2,
                    '--rate', 20, '--landmarks', 10, '--dim', 0.05, 0.1)
    assert result.exit_code == 0, result.output
    sequence = open_sequence('simulator', tmp_path / 'sim')
    assert len(sequence) == 5
    assert len(sequence.ground_truth()) == 5
    left, _ = sequence.frames(1)
    bright, _ = sequence.frames(0)
    assert left.max() < bright.max()


def test_should_refuse_bad_simulation_parameters(tmp_path):
    assert invoke(tmp_path, 'simulate', tmp_path / 'sim', '--duration', -1).exit_code == 2


def test_should_count_more_events_in_wider_windows(tmp_path, sequence_dir):
    out = tmp_path / 'ablation'
    result = invoke(tmp_path, 'ablate-windows', '--dataset', sequence_dir, '--width', 2.5, '--width', 5,
                    '--width', 10, '--width', 20, '--count', 50, '--output-dir', out)
    assert result.exit_code == 0, result.output
    with (out / 'windows.csv').open() as f:
        rows = list(csv.DictReader(f))
    widths = [row for row in rows if row['window'] == 'width_ms']
    counts = [int(row['events']) for row in widths]
    assert [float(row['value']) for row in widths] == [2.5, 5.0, 10.0, 20.0]
    assert counts == sorted(counts)
    assert (out / 'width_20ms.png').is_file()
    assert (out / 'count_50.png').is_file()


def test_should_refuse_zero_window_width(tmp_path, sequence_dir):
    result = invoke(tmp_path, 'ablate-windows', '--dataset', sequence_dir, '--width', 0, '--output-dir',
                    tmp_path / 'ablation')
    assert result.exit_code == 2


def test_should_write_alignment_offset_into_calibration(tmp_path):
    calibration = tmp_path / 'calibration.yaml'
    dump_calibration(default_rig(), calibration)
    warped = np.random.default_rng(0).uniform(0, 300, size=(20, 2))
    frame = warped + [-160.0, -235.0]
    matches = tmp_path / 'matches.csv'
    matches.write_text('fx,fy,ex,ey\n' + ''.join(f'{f[0]:.12f},{f[1]:.12f},{e[0]:.12f},{e[1]:.12f}\n'
                                                 for f, e in zip(frame, warped)))
    result = invoke(tmp_path, 'calibrate-align', calibration, matches, '--side', 'right', '--write')
    assert result.exit_code == 0, result.output
    assert 'right offset: -160.0000 -235.0000' in result.output
    rig = load_calibration(calibration)
    np.testing.assert_allclose(rig.align_right, [-160.0, -235.0], atol=1e-9)
    np.testing.assert_array_equal(rig.align_left, [0.0, 0.0])


def test_should_exit_with_data_code_for_missing_matches(tmp_path):
    calibration = tmp_path / 'calibration.yaml'
    dump_calibration(default_rig(), calibration)
    assert invoke(tmp_path, 'calibrate-align', calibration, tmp_path / 'absent.csv').exit_code == 3


def test_should_plot_trajectory_over_ground_truth(tmp_path, trajectory):
    result = invoke(tmp_path, 'plot', trajectory, '--ground-truth', trajectory, '--output', tmp_path / 'plot.png')
    assert result.exit_code == 0, result.output
    assert (tmp_path / 'plot.png').stat().st_size > 0

import numpy as np
import pytest
import yaml

from lib.calibration import calibration_from_dict, dump_calibration, load_calibration
from lib.errors import CalibrationError

GOLDEN = """
cam_left: {fx: 120.0, fy: 121.0, cx: 80.0, cy: 60.0, width: 160, height: 120}
cam_right: {fx: 119.0, fy: 120.5, cx: 79.5, cy: 60.5, width: 160, height: 120}
dvs_left: {fx: 110.0, fy: 110.0, cx: 80.0, cy: 60.0, width: 160, height: 120}
dvs_right: {fx: 110.0, fy: 110.0, cx: 80.0, cy: 60.0, width: 160, height: 120}
T_cd_left: {translation: [0.01, 0.0, 0.0], quaternion_xyzw: [0.0, 0.0, 0.0, 1.0]}
T_cd_right: {translation: [0.01, 0.0, 0.0], quaternion_xyzw: [0.0, 0.0, 0.0, 1.0]}
T_lr: {translation: [-0.1, 0.0, 0.0], quaternion_xyzw: [0.0, 0.0, 0.0, 1.0]}
align_left: [-160, -235]
align_right: [-160, -235]
exposure_time: 1e-2
"""


@pytest.fixture(name='golden')
def fixture_golden():
    return yaml.safe_load(GOLDEN)


def test_should_load_documented_keys(tmp_path):
    path = tmp_path / 'rig.yaml'
    path.write_text(GOLDEN)
    rig = load_calibration(path)
    assert rig.cam_left.fx == 120.0
    assert rig.cam_right.cy == 60.5
    assert rig.dvs_left.width == 160
    assert rig.baseline == pytest.approx(0.1)
    np.testing.assert_allclose(rig.align_left, [-160, -235])
    assert rig.exposure_time == pytest.approx(0.01)


def test_should_dump_the_same_key_set(tmp_path, golden):
    rig = calibration_from_dict(golden)
    path = tmp_path / 'out.yaml'
    dump_calibration(rig, path)
    dumped = yaml.safe_load(path.read_text())
    assert list(dumped.keys()) == ['cam_left', 'cam_right', 'dvs_left', 'dvs_right', 'T_cd_left', 'T_cd_right',
                                   'T_lr', 'align_left', 'align_right', 'exposure_time']
    assert set(dumped['cam_left'].keys()) == {'fx', 'fy', 'cx', 'cy', 'width', 'height'}
    assert set(dumped['T_lr'].keys()) == {'translation', 'quaternion_xyzw'}
    reloaded = load_calibration(path)
    np.testing.assert_allclose(reloaded.T_lr.as_matrix(), rig.T_lr.as_matrix(), atol=1e-12)
    np.testing.assert_allclose(reloaded.align_right, rig.align_right)


def test_should_complain_about_missing_keys(golden):
    del golden['T_lr']
    with pytest.raises(CalibrationError, match="Missing required key 'T_lr'"):
        calibration_from_dict(golden)


def test_should_reject_zero_baseline(golden):
    golden['T_lr']['translation'] = [0.0, 0.0, 0.0]
    with pytest.raises(CalibrationError, match="baseline"):
        calibration_from_dict(golden)


def test_should_reject_non_finite_alignment(golden):
    golden['align_left'] = [float('nan'), 0.0]
    with pytest.raises(CalibrationError, match="finite"):
        calibration_from_dict(golden)


def test_should_complain_about_missing_file(tmp_path):
    with pytest.raises(CalibrationError, match="not found"):
        load_calibration(tmp_path / 'nope.yaml')

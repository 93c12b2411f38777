import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np
import yaml

from lib.config_safe_loader import load_yaml
from lib.errors import CalibrationError
from lib.geometry import PinholeCamera, Pose, RigCalibration

logger = logging.getLogger(__name__)

CAMERA_KEYS = ('cam_left', 'cam_right', 'dvs_left', 'dvs_right')
EXTRINSIC_KEYS = ('T_cd_left', 'T_cd_right', 'T_lr')
INTRINSIC_KEYS = ('fx', 'fy', 'cx', 'cy', 'width', 'height')


def _camera_from(name: str, node: Any) -> PinholeCamera:
    if not isinstance(node, Mapping):
        raise CalibrationError(f"Calibration entry '{name}' must be a mapping")
    missing = [key for key in INTRINSIC_KEYS if key not in node]
    if missing:
        raise CalibrationError(f"Calibration entry '{name}' is missing {', '.join(missing)}")
    return PinholeCamera(fx=float(node['fx']), fy=float(node['fy']), cx=float(node['cx']), cy=float(node['cy']),
                         width=int(node['width']), height=int(node['height']))


def _pose_from(name: str, node: Any) -> Pose:
    if not isinstance(node, Mapping) or 'translation' not in node or 'quaternion_xyzw' not in node:
        raise CalibrationError(f"Calibration entry '{name}' needs 'translation' and 'quaternion_xyzw'")
    translation = np.asarray(node['translation'], dtype=float)
    quaternion = np.asarray(node['quaternion_xyzw'], dtype=float)
    if translation.shape != (3,) or quaternion.shape != (4,) or not np.linalg.norm(quaternion) > 0:
        raise CalibrationError(f"Calibration entry '{name}' has a malformed pose")
    return Pose.from_quaternion(translation, quaternion)


def _vector2(name: str, node: Any) -> np.ndarray:
    value = np.asarray(node, dtype=float)
    if value.shape != (2,):
        raise CalibrationError(f"Calibration entry '{name}' must be a pair of pixel offsets")
    return value


def calibration_from_dict(document: Mapping[str, Any]) -> RigCalibration:
    if not isinstance(document, Mapping):
        raise CalibrationError("Calibration document must be a mapping")
    for key in CAMERA_KEYS + EXTRINSIC_KEYS:
        if key not in document:
            raise CalibrationError(f"Missing required key '{key}'")
    try:
        return RigCalibration(
            cam_left=_camera_from('cam_left', document['cam_left']),
            cam_right=_camera_from('cam_right', document['cam_right']),
            dvs_left=_camera_from('dvs_left', document['dvs_left']),
            dvs_right=_camera_from('dvs_right', document['dvs_right']),
            T_cd_left=_pose_from('T_cd_left', document['T_cd_left']),
            T_cd_right=_pose_from('T_cd_right', document['T_cd_right']),
            T_lr=_pose_from('T_lr', document['T_lr']),
            align_left=_vector2('align_left', document.get('align_left', [0.0, 0.0])),
            align_right=_vector2('align_right', document.get('align_right', [0.0, 0.0])),
            exposure_time=float(document.get('exposure_time', 0.0)))
    except (TypeError, ValueError) as e:
        raise CalibrationError(f"Malformed calibration: {e}") from e


def _camera_to(cam: PinholeCamera) -> Dict[str, Any]:
    return dict(fx=float(cam.fx), fy=float(cam.fy), cx=float(cam.cx), cy=float(cam.cy),
                width=int(cam.width), height=int(cam.height))


def _pose_to(pose: Pose) -> Dict[str, Any]:
    return dict(translation=[float(x) for x in pose.translation],
                quaternion_xyzw=[float(x) for x in pose.quaternion])


def calibration_to_dict(calibration: RigCalibration) -> Dict[str, Any]:
    return {
        'cam_left': _camera_to(calibration.cam_left),
        'cam_right': _camera_to(calibration.cam_right),
        'dvs_left': _camera_to(calibration.dvs_left),
        'dvs_right': _camera_to(calibration.dvs_right),
        'T_cd_left': _pose_to(calibration.T_cd_left),
        'T_cd_right': _pose_to(calibration.T_cd_right),
        'T_lr': _pose_to(calibration.T_lr),
        'align_left': [float(x) for x in calibration.align_left],
        'align_right': [float(x) for x in calibration.align_right],
        'exposure_time': float(calibration.exposure_time),
    }


def load_calibration(path: Union[str, Path]) -> RigCalibration:
    path = Path(path)
    if not path.is_file():
        raise CalibrationError(f"Calibration file {path} not found")
    with path.open(encoding='utf-8') as f:
        try:
            document = load_yaml(f)
        except yaml.YAMLError as e:
            raise CalibrationError(f"Unable to parse {path}: {e}") from e
    logger.debug("Loaded calibration from %s", path)
    return calibration_from_dict(document)


def dump_calibration(calibration: RigCalibration, path: Union[str, Path]) -> None:
    path = Path(path)
    with path.open('w', encoding='utf-8') as f:
        yaml.safe_dump(calibration_to_dict(calibration), f, sort_keys=False, default_flow_style=None)
    logger.info("Wrote calibration to %s", path)

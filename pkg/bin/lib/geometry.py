"""
Rigid-body poses, the pinhole camera model and the four-camera hybrid rig.

Poses of frames and keyframes map world points into the (left) camera, i.e.
``x_camera = R @ x_world + t``. Quaternions are always stored in (x, y, z, w)
order, with the canonical sign w >= 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.transform import Rotation

from lib.errors import CalibrationError, DegenerateRays, NonPositiveDepth

PARALLEL_RAY_TOLERANCE = 1e-12


class Side(Enum):
    LEFT = 'left'
    RIGHT = 'right'


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def canonical_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return -q if q[3] < 0 else q


@dataclass(frozen=True, eq=False)
class PoseIncrement:
    """Seven-component increment: translation then quaternion (x, y, z, w)."""
    delta_translation: np.ndarray
    delta_quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'delta_translation', np.asarray(self.delta_translation, dtype=float).reshape(3))
        object.__setattr__(self, 'delta_quaternion', np.asarray(self.delta_quaternion, dtype=float).reshape(4))

    @staticmethod
    def from_vector(mu: np.ndarray) -> PoseIncrement:
        mu = np.asarray(mu, dtype=float).reshape(7)
        return PoseIncrement(mu[:3], mu[3:])

    @staticmethod
    def zero() -> PoseIncrement:
        return PoseIncrement(np.zeros(3), np.zeros(4))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.delta_translation, self.delta_quaternion])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, 'rotation', np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, 'translation', np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> Pose:
        return Pose()

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> Pose:
        matrix = np.asarray(matrix, dtype=float)
        return Pose(matrix[:3, :3], matrix[:3, 3])

    @staticmethod
    def from_quaternion(translation: np.ndarray, quaternion_xyzw: np.ndarray) -> Pose:
        return Pose(Rotation.from_quat(quaternion_xyzw).as_matrix(), translation)

    @staticmethod
    def from_rotvec(rotvec: np.ndarray, translation: np.ndarray) -> Pose:
        return Pose(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    @property
    def quaternion(self) -> np.ndarray:
        return canonical_quaternion(Rotation.from_matrix(self.rotation).as_quat())

    @property
    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    @property
    def rotation_angle(self) -> float:
        return float(np.linalg.norm(self.rotvec))

    def compose(self, other: Pose) -> Pose:
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def retract(self, delta: np.ndarray) -> Pose:
        """Left perturbation: rotation vector delta[:3] and translation delta[3:] applied before this pose."""
        delta = np.asarray(delta, dtype=float)
        step = Rotation.from_rotvec(delta[:3]).as_matrix()
        return Pose(step @ self.rotation, step @ self.translation + delta[3:6])

    def power(self, exponent: float) -> Pose:
        """The motion repeated ``exponent`` times; fractions interpolate along its screw axis."""
        if exponent == 1:
            return self
        if exponent == 0:
            return Pose.identity()
        return Pose.from_matrix(np.real(linalg.expm(exponent * linalg.logm(self.as_matrix()))))

    def center(self) -> np.ndarray:
        """Position of the camera in the world for a world-to-camera pose."""
        return -self.rotation.T @ self.translation

    def __repr__(self) -> str:
        translation = np.array2string(self.translation, precision=4)
        return f'Pose(t={translation}, q={np.array2string(self.quaternion, precision=4)})'


def se3_exp(mu: PoseIncrement) -> Pose:
    if not (np.all(np.isfinite(mu.delta_translation)) and np.all(np.isfinite(mu.delta_quaternion))):
        raise ValueError("Pose increment has non-finite components")
    norm = np.linalg.norm(mu.delta_quaternion)
    if norm == 0.0:
        return Pose(np.eye(3), mu.delta_translation)
    return Pose(Rotation.from_quat(mu.delta_quaternion / norm).as_matrix(), mu.delta_translation)


def se3_log(pose: Pose) -> PoseIncrement:
    return PoseIncrement(pose.translation.copy(), pose.quaternion)


def relative_error(estimate: Pose, truth: Pose) -> Tuple[float, float]:
    """Translational (metres) and rotational (radians) distance between two poses."""
    delta = truth.inverse().compose(estimate)
    return float(np.linalg.norm(estimate.center() - truth.center())), delta.rotation_angle


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"Focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CalibrationError(
                f"Principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")

    @property
    def K(self) -> np.ndarray:  # pylint: disable=invalid-name
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:  # pylint: disable=invalid-name
        return np.linalg.inv(self.K)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def project_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        return np.stack([self.fx * x / z + self.cx, self.fy * y / z + self.cy], axis=-1)

    def unproject(self, px: np.ndarray, depth) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        depth = np.asarray(depth, dtype=float)
        x = (px[..., 0] - self.cx) / self.fx * depth
        y = (px[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)

    def rays(self, px: np.ndarray) -> np.ndarray:
        return self.unproject(px, 1.0)

    def contains(self, px: np.ndarray, margin: float = 0.0) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        u, v = px[..., 0], px[..., 1]
        return (u >= margin) & (u <= self.width - 1 - margin) & (v >= margin) & (v <= self.height - 1 - margin)


def project(cam: PinholeCamera, pose: Pose, point: np.ndarray) -> np.ndarray:
    transformed = pose.transform(np.asarray(point, dtype=float).reshape(3))
    if transformed[2] <= 0:
        raise NonPositiveDepth(f"Point at depth {transformed[2]} is behind the camera")
    return cam.project_camera(transformed)


def project_points(cam: PinholeCamera, pose: Pose, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pixels and depths of many world points; pixels are NaN where the depth is not positive."""
    transformed = pose.transform(np.asarray(points, dtype=float).reshape(-1, 3))
    depth = transformed[:, 2]
    px = np.full((transformed.shape[0], 2), np.nan)
    ahead = depth > 0
    px[ahead] = cam.project_camera(transformed[ahead])
    return px, depth


def reprojection_jacobians(cam: PinholeCamera, pose: Pose, points: np.ndarray,
                           extrinsic: Optional[Pose] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Projection of world points through ``extrinsic * pose`` and its derivatives.

    Returns pixels (N, 2), the Jacobian w.r.t. the left retraction of ``pose``
    (N, 2, 6; rotation then translation) and the Jacobian w.r.t. the point (N, 2, 3).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    in_left = pose.transform(points)
    if extrinsic is None:
        in_camera = in_left
        chain = np.eye(3)
    else:
        in_camera = extrinsic.transform(in_left)
        chain = extrinsic.rotation
    x, y, z = in_camera[:, 0], in_camera[:, 1], in_camera[:, 2]
    px = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=-1)

    d_pi = np.zeros((points.shape[0], 2, 3))
    d_pi[:, 0, 0] = cam.fx / z
    d_pi[:, 0, 2] = -cam.fx * x / z ** 2
    d_pi[:, 1, 1] = cam.fy / z
    d_pi[:, 1, 2] = -cam.fy * y / z ** 2

    d_pi_chain = d_pi @ chain
    jac_pose = np.empty((points.shape[0], 2, 6))
    jac_pose[:, :, :3] = d_pi_chain @ -skew_batch(in_left)
    jac_pose[:, :, 3:] = d_pi_chain
    jac_point = d_pi_chain @ pose.rotation
    return px, jac_pose, jac_point


def triangulate_many(cam_l: PinholeCamera, cam_r: PinholeCamera, T_lr: Pose,  # pylint: disable=invalid-name
                     px_l: np.ndarray, px_r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Midpoint triangulation of pixel pairs, expressed in the left camera frame.

    ``T_lr`` maps left-camera coordinates into the right camera. Returns the points
    (N, 3) and a mask of pairs whose rays are not parallel.
    """
    d_l = cam_l.rays(np.atleast_2d(px_l))
    rot_rl = T_lr.rotation.T
    c_r = -rot_rl @ T_lr.translation
    d_r = cam_r.rays(np.atleast_2d(px_r)) @ rot_rl.T

    a = np.einsum('ij,ij->i', d_l, d_l)
    b = np.einsum('ij,ij->i', d_l, d_r)
    c = np.einsum('ij,ij->i', d_r, d_r)
    w0 = -c_r
    d = d_l @ w0
    e = d_r @ w0
    sin_angle = np.linalg.norm(np.cross(d_l, d_r), axis=1) / np.sqrt(a * c)
    valid = sin_angle > PARALLEL_RAY_TOLERANCE

    denom = np.where(valid, a * c - b * b, 1.0)
    s = (b * e - c * d) / denom
    u = (a * e - b * d) / denom
    midpoints = 0.5 * (s[:, None] * d_l + c_r + u[:, None] * d_r)
    midpoints[~valid] = np.nan
    return midpoints, valid


def triangulate(cam_l: PinholeCamera, cam_r: PinholeCamera, T_lr: Pose,  # pylint: disable=invalid-name
                px_l: np.ndarray, px_r: np.ndarray) -> np.ndarray:
    points, valid = triangulate_many(cam_l, cam_r, T_lr, px_l, px_r)
    if not valid[0]:
        raise DegenerateRays(f"Rays through {px_l} and {px_r} are parallel")
    return points[0]


@dataclass(frozen=True, eq=False)
class RigCalibration:
    cam_left: PinholeCamera
    cam_right: PinholeCamera
    dvs_left: PinholeCamera
    dvs_right: PinholeCamera
    T_cd_left: Pose  # pylint: disable=invalid-name
    T_cd_right: Pose  # pylint: disable=invalid-name
    T_lr: Pose  # pylint: disable=invalid-name
    align_left: np.ndarray = field(default_factory=lambda: np.zeros(2))
    align_right: np.ndarray = field(default_factory=lambda: np.zeros(2))
    exposure_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'align_left', np.asarray(self.align_left, dtype=float).reshape(2))
        object.__setattr__(self, 'align_right', np.asarray(self.align_right, dtype=float).reshape(2))
        if not np.linalg.norm(self.T_lr.translation) > 0:
            raise CalibrationError("Stereo baseline must be non-zero")
        if not (np.all(np.isfinite(self.align_left)) and np.all(np.isfinite(self.align_right))):
            raise CalibrationError("Alignment offsets must be finite")
        if not self.exposure_time >= 0:
            raise CalibrationError(f"Exposure time must be non-negative (got {self.exposure_time})")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.T_lr.translation))

    def camera(self, side: Side) -> PinholeCamera:
        return self.cam_left if side == Side.LEFT else self.cam_right

    def dvs(self, side: Side) -> PinholeCamera:
        return self.dvs_left if side == Side.LEFT else self.dvs_right

    def event_extrinsic(self, side: Side) -> Pose:
        return self.T_cd_left if side == Side.LEFT else self.T_cd_right

    def alignment(self, side: Side) -> np.ndarray:
        return self.align_left if side == Side.LEFT else self.align_right

    def extrinsic(self, side: Side) -> Optional[Pose]:
        """Transform from the left camera into the camera on ``side`` (None for the left camera)."""
        return None if side == Side.LEFT else self.T_lr

    def with_alignment(self, side: Side, offset: np.ndarray) -> RigCalibration:
        if side == Side.LEFT:
            return replace(self, align_left=np.asarray(offset, dtype=float))
        return replace(self, align_right=np.asarray(offset, dtype=float))

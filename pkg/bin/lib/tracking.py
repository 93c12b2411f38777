"""
Per-frame pose estimation against the shared map.

A frame's pose is predicted with a constant-velocity model, map points are
projected into the predicted view and matched, and the pose is refined by
minimizing the robust reprojection error of the matched points with the map
held constant. Keyframes are promoted when the share of the reference
keyframe's visible points that is still tracked drops below the configured
ratio, or when too few points are tracked at all.

When descriptors stop matching on a frame weighted towards its events (the
frames went dark), the map points are instead pulled onto the event-dense
pixels of a smoothed event image.
"""
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from lib.errors import (ConfigError, DivergedPose, HybridPtamError, InsufficientMatches, SolverError,
                        TrackingLost)
from lib.features import (BORDER, Detector, FeatureSet, MatchingParams, compute_embedding, match_stereo,
                          match_temporal)
from lib.fusion import FusionFrame, FusionMode
from lib.geometry import Pose, RigCalibration, Side, project_points, reprojection_jacobians
from lib.mapping import Keyframe, MapSnapshot, SharedMap
from lib.solver import DenseLinearization, HuberLoss, LMResult, LMSettings, SolverConfig, lm_minimize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackingConfig:
    keyframe_ratio: float = 0.9
    keyframe_min_tracked: int = 20
    min_matches: int = 4
    min_inliers: int = 10
    max_mean_error: float = 5.0
    outlier_weight: float = 0.5
    restart_after: int = 5
    event_alignment: bool = True
    event_sigma: float = 2.0
    event_support: float = 0.3

    def __post_init__(self):
        if not 0 < self.keyframe_ratio <= 1:
            raise ConfigError(f"tracking.keyframe_ratio must be in (0, 1] (got {self.keyframe_ratio})")
        if self.keyframe_min_tracked < 0:
            raise ConfigError(f"tracking.keyframe_min_tracked must be non-negative (got {self.keyframe_min_tracked})")
        if self.min_matches < 4:
            raise ConfigError(f"tracking.min_matches must be at least 4 (got {self.min_matches})")
        if self.min_inliers < self.min_matches:
            raise ConfigError("tracking.min_inliers must not be below tracking.min_matches")
        if not self.max_mean_error > 0:
            raise ConfigError(f"tracking.max_mean_error must be positive (got {self.max_mean_error})")
        if self.restart_after < 1:
            raise ConfigError(f"tracking.restart_after must be at least 1 (got {self.restart_after})")
        if not self.event_sigma > 0:
            raise ConfigError(f"tracking.event_sigma must be positive (got {self.event_sigma})")
        if not 0 < self.event_support <= 1:
            raise ConfigError(f"tracking.event_support must be in (0, 1] (got {self.event_support})")


@dataclass(frozen=True, eq=False)
class TrackingState:
    current_pose: Pose
    velocity: Optional[Pose] = None
    last_keyframe_id: Optional[int] = None
    keyframe_pose: Optional[Pose] = None
    tracked_count: int = 0
    reference_count: int = 0
    loop_generation: int = 0
    lost: bool = False
    frame_index: int = 0


def predict_pose(state: TrackingState, frame_index: Optional[int] = None) -> Pose:
    """Constant-velocity prediction ``frame_index - state.frame_index`` frames ahead (one by default)."""
    if state.velocity is None:
        return state.current_pose
    steps = 1 if frame_index is None else frame_index - state.frame_index
    if steps <= 0:
        return state.current_pose
    return state.velocity.power(steps).compose(state.current_pose)


def keyframe_decision(tracked_count: int, reference_count: int, ratio: float = 0.9) -> bool:
    """True when fewer than ``ratio`` of the reference keyframe's points are still tracked."""
    if reference_count <= 0:
        raise ValueError(f"Reference point count must be positive (got {reference_count})")
    threshold = Fraction(str(ratio))
    return tracked_count * threshold.denominator < reference_count * threshold.numerator


@dataclass(frozen=True, eq=False)
class Measurements:
    """World points and the pixels they were measured at, in the left or the right camera."""
    points: np.ndarray
    px: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'points', np.asarray(self.points, dtype=float).reshape(-1, 3))
        object.__setattr__(self, 'px', np.asarray(self.px, dtype=float).reshape(-1, 2))
        object.__setattr__(self, 'right', np.asarray(self.right, dtype=bool).reshape(-1))

    @staticmethod
    def left(points: np.ndarray, px: np.ndarray) -> 'Measurements':
        return Measurements(points, px, np.zeros(len(np.asarray(px).reshape(-1, 2)), dtype=bool))

    def __len__(self) -> int:
        return len(self.px)

    def subset(self, mask: np.ndarray) -> 'Measurements':
        return Measurements(self.points[mask], self.px[mask], self.right[mask])


class PoseProblem:
    def __init__(self, rig: RigCalibration, measurements: Measurements):
        self.rig = rig
        self.measurements = measurements
        self.groups = [(side, np.nonzero(measurements.right == (side == Side.RIGHT))[0])
                       for side in (Side.LEFT, Side.RIGHT)]

    def _evaluate(self, pose: Pose):
        residuals = np.zeros((len(self.measurements), 2))
        jacobian = np.zeros((len(self.measurements), 2, 6))
        for side, rows in self.groups:
            if len(rows):
                predicted, jac_pose, _ = reprojection_jacobians(
                    self.rig.camera(side), pose, self.measurements.points[rows], self.rig.extrinsic(side))
                residuals[rows] = self.measurements.px[rows] - predicted
                jacobian[rows] = -jac_pose
        return residuals, jacobian

    def residuals(self, pose: Pose) -> np.ndarray:
        return self._evaluate(pose)[0]

    def linearize(self, pose: Pose) -> DenseLinearization:
        return DenseLinearization(*self._evaluate(pose))

    @staticmethod
    def retract(pose: Pose, step: np.ndarray) -> Pose:
        return pose.retract(step)


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray
    mean_error: float
    result: LMResult

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))


def refine_pose(measurements: Measurements, prior: Pose, rig: RigCalibration, loss: Optional[HuberLoss] = None,
                settings: Optional[LMSettings] = None, cfg: Optional[TrackingConfig] = None) -> PoseEstimate:
    """
    Robust pose refinement with the points held fixed.

    A first robust pass flags outliers by their final weight; the pose is then
    re-estimated from the inliers alone.
    """
    cfg = cfg or TrackingConfig()
    loss = loss or HuberLoss()
    if len(measurements) < cfg.min_matches:
        raise InsufficientMatches(f"Pose refinement needs at least {cfg.min_matches} matches "
                                  f"(got {len(measurements)})")
    result = lm_minimize(PoseProblem(rig, measurements), prior, loss, settings)
    inliers = result.weights >= cfg.outlier_weight
    if cfg.min_matches <= np.count_nonzero(inliers) < len(measurements):
        logger.debug("Refining pose again without %d outliers", len(measurements) - np.count_nonzero(inliers))
        result = lm_minimize(PoseProblem(rig, measurements.subset(inliers)), result.state, loss, settings)
    pose = result.state
    errors = np.linalg.norm(PoseProblem(rig, measurements.subset(inliers)).residuals(pose), axis=1)
    mean_error = float(np.mean(errors)) if len(errors) else float('inf')
    if not mean_error <= cfg.max_mean_error:
        raise DivergedPose(f"Mean reprojection error {mean_error:.2f} px over {len(errors)} inliers "
                           f"exceeds {cfg.max_mean_error} px")
    return PoseEstimate(pose, inliers, mean_error, result)


def event_surface(image: np.ndarray, sigma: float) -> np.ndarray:
    """Event image blurred into a smooth field whose peak is one."""
    surface = ndimage.gaussian_filter(np.asarray(image, dtype=float), sigma, mode='constant')
    peak = surface.max(initial=0.0)
    return surface / peak if peak > 0 else surface


def _sample(image: np.ndarray, px: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(image, [px[:, 1], px[:, 0]], order=1, mode='constant', cval=0.0)


class EventAlignmentProblem:
    """One residual ``1 - surface(pixel)`` per map point and camera; zero where a point sits on the event peak."""

    def __init__(self, rig: RigCalibration, points: Dict[Side, np.ndarray], surfaces: Dict[Side, np.ndarray]):
        self.rig = rig
        self.points = points
        self.surfaces = surfaces
        self.gradients = {side: np.gradient(surface) for side, surface in surfaces.items()}

    def _evaluate(self, pose: Pose):
        residuals, jacobians = [], []
        for side, points in self.points.items():
            px, jac_pose, _ = reprojection_jacobians(self.rig.camera(side), pose, points, self.rig.extrinsic(side))
            grad_rows, grad_cols = self.gradients[side]
            gradient = np.column_stack([_sample(grad_cols, px), _sample(grad_rows, px)])
            residuals.append(1.0 - _sample(self.surfaces[side], px))
            jacobians.append(-np.einsum('nk,nkj->nj', gradient, jac_pose))
        return np.concatenate(residuals).reshape(-1, 1), np.concatenate(jacobians).reshape(-1, 1, 6)

    def residuals(self, pose: Pose) -> np.ndarray:
        return self._evaluate(pose)[0]

    def linearize(self, pose: Pose) -> DenseLinearization:
        return DenseLinearization(*self._evaluate(pose))

    def support(self, pose: Pose, level: float) -> int:
        """Left-camera points whose pixel lies on at least ``level`` of the event peak."""
        px, _ = project_points(self.rig.cam_left, pose, self.points[Side.LEFT])
        return int(np.count_nonzero(_sample(self.surfaces[Side.LEFT], np.nan_to_num(px, nan=-1.0)) >= level))

    @staticmethod
    def retract(pose: Pose, step: np.ndarray) -> Pose:
        return pose.retract(step)


def in_view(rig: RigCalibration, pose: Pose, positions: np.ndarray, params: MatchingParams,
            side: Side = Side.LEFT) -> np.ndarray:
    """Mask of points inside the describable part of the image and the depth range of the frustum."""
    cam = rig.camera(side)
    view = pose if side == Side.LEFT else rig.extrinsic(side).compose(pose)
    px, depth = project_points(cam, view, positions)
    return (cam.contains(np.nan_to_num(px, nan=-1e9), BORDER)
            & (depth >= params.frustum_near) & (depth <= params.frustum_far))


@dataclass(frozen=True, eq=False)
class TrackResult:
    frame_index: int
    timestamp: float
    pose: Pose
    keyframe: Optional[Keyframe]
    matches: int
    inliers: int
    tracked_count: int
    reference_count: int
    reference_id: Optional[int] = None
    # pose relative to the reference keyframe: pose = relative * keyframe pose
    relative: Pose = field(default_factory=Pose.identity)
    events_only: bool = False


class Tracker:
    """Owns the tracking state and turns fusion frames into poses and keyframe candidates."""

    def __init__(self, shared: SharedMap, rig: RigCalibration, detector: Detector, params: MatchingParams,
                 cfg: TrackingConfig, solver: SolverConfig):
        self.shared = shared
        self.rig = rig
        self.detector = detector
        self.params = params
        self.cfg = cfg
        self.solver = solver
        self.state = TrackingState(Pose.identity())
        self.feature_count = 0

    def _features(self, frame: FusionFrame):
        left = self.detector.detect(frame.image_left)
        right = self.detector.detect(frame.image_right)
        self.feature_count = len(left)
        return left, right, match_stereo(left, right, self.params, self.detector.distance_scale)

    def _make_keyframe(self, frame_index: int, timestamp: float, pose: Pose, left: FeatureSet, right: FeatureSet,
                       stereo: np.ndarray, point_ids: np.ndarray) -> Keyframe:
        return Keyframe(id=self.shared.allocate_keyframe_id(), frame_index=frame_index, timestamp=timestamp,
                        pose=pose, features_left=left, features_right=right, stereo_matches=stereo,
                        feature_point_ids=point_ids, embedding=compute_embedding(left),
                        loop_generation=self.state.loop_generation)

    def bootstrap(self, frame: FusionFrame, frame_index: int = 0) -> Keyframe:
        """The first frame becomes a keyframe at the world origin."""
        self.state = TrackingState(Pose.identity(), loop_generation=self.shared.loop_generation,
                                   frame_index=frame_index)
        left, right, stereo = self._features(frame)
        if len(left) == 0:
            raise TrackingLost(f"No features in frame {frame_index}; cannot initialize the map")
        keyframe = self._make_keyframe(frame_index, frame.timestamp, Pose.identity(), left, right, stereo,
                                       np.full(len(left), -1, dtype=np.intp))
        self.state = TrackingState(Pose.identity(), last_keyframe_id=keyframe.id, keyframe_pose=Pose.identity(),
                                   reference_count=len(stereo), loop_generation=self.shared.loop_generation,
                                   frame_index=frame_index)
        logger.info("Initialized map from frame %d with %d stereo matches", frame_index, len(stereo))
        return keyframe

    def _follow_loop_correction(self, snapshot: MapSnapshot) -> None:
        state = self.state
        if snapshot.loop_generation == state.loop_generation:
            return
        corrected = snapshot.keyframes.get(state.last_keyframe_id)
        pose = state.current_pose
        if corrected is not None and state.keyframe_pose is not None:
            pose = pose.compose(state.keyframe_pose.inverse()).compose(corrected.pose)
        logger.info("Loop correction %d applied to the motion model", snapshot.loop_generation)
        self.state = replace(state, current_pose=pose, velocity=None, loop_generation=snapshot.loop_generation,
                             keyframe_pose=corrected.pose if corrected is not None else state.keyframe_pose)

    def _lost(self, frame_index: int, reason: str) -> TrackingLost:
        """Hold the last tracked pose and velocity; the next prediction spans the gap."""
        self.state = replace(self.state, tracked_count=0, lost=True)
        return TrackingLost(f"Tracking lost at frame {frame_index}: {reason}")

    def _reference_pose(self, snapshot: MapSnapshot) -> Pose:
        reference = snapshot.keyframes.get(self.state.last_keyframe_id)
        if reference is not None:
            return reference.pose
        return self.state.keyframe_pose if self.state.keyframe_pose is not None else Pose.identity()

    def _reference_counts(self, snapshot: MapSnapshot, pose: Pose, tracked_ids: np.ndarray,
                          inlier_count: int) -> Tuple[int, int]:
        """Reference keyframe points in view of ``pose`` that were tracked, and all of them."""
        reference = snapshot.keyframes.get(self.state.last_keyframe_id)
        if reference is None:
            return min(inlier_count, self.state.reference_count), self.state.reference_count
        ids = np.array([pid for pid in reference.point_ids() if pid in snapshot.points], dtype=np.intp)
        if len(ids) == 0:
            return 0, 0
        positions = np.array([snapshot.points[pid].position for pid in ids])
        visible = ids[in_view(self.rig, pose, positions, self.params)]
        return len(np.intersect1d(visible, tracked_ids)), len(visible)

    def _advance(self, pose: Pose, frame_index: int, keyframe: Optional[Keyframe], tracked_count: int,
                 reference_count: int) -> None:
        state = self.state
        steps = max(frame_index - state.frame_index, 1)
        self.state = TrackingState(
            current_pose=pose, velocity=pose.compose(state.current_pose.inverse()).power(1.0 / steps),
            last_keyframe_id=keyframe.id if keyframe is not None else state.last_keyframe_id,
            keyframe_pose=pose if keyframe is not None else state.keyframe_pose,
            tracked_count=tracked_count, reference_count=reference_count,
            loop_generation=state.loop_generation, frame_index=frame_index)

    def track_frame(self, frame: FusionFrame, frame_index: int) -> TrackResult:
        snapshot = self.shared.snapshot()
        self._follow_loop_correction(snapshot)
        predicted = predict_pose(self.state, frame_index)
        try:
            return self._track_features(frame, frame_index, snapshot, predicted)
        except (InsufficientMatches, DivergedPose, SolverError) as e:
            if not self._events_usable(frame):
                raise self._lost(frame_index, str(e)) from e
            logger.info("Frame %d: %s; aligning the map to the events", frame_index, e)
        return self._track_events(frame, frame_index, snapshot, predicted)

    def _events_usable(self, frame: FusionFrame) -> bool:
        return (self.cfg.event_alignment and frame.mode == FusionMode.DVS_BIASED
                and frame.events_left is not None and frame.events_right is not None)

    def _track_features(self, frame: FusionFrame, frame_index: int, snapshot: MapSnapshot,
                        predicted: Pose) -> TrackResult:
        previous = self.state.current_pose
        left, right, stereo = self._features(frame)
        if len(left) == 0:
            raise InsufficientMatches("no features detected")

        point_ids = np.array(sorted(snapshot.points), dtype=np.intp)
        positions = np.array([snapshot.points[pid].position for pid in point_ids]).reshape(-1, 3)
        descriptors = np.array([snapshot.points[pid].descriptor for pid in point_ids]).reshape(len(point_ids), -1)
        predicted_px, depth = project_points(self.rig.cam_left, predicted, positions)
        previous_px, _ = project_points(self.rig.cam_left, previous, positions)
        matches = match_temporal(left, predicted_px, descriptors, self.params, previous_px=previous_px,
                                 predicted_depth=depth, distance_scale=self.detector.distance_scale,
                                 image_shape=frame.image_left.shape)
        if len(matches) < self.cfg.min_matches:
            raise InsufficientMatches(f"{len(matches)} map points matched")

        # stereo-matched features also constrain the pose through the right camera
        right_of = dict(zip(stereo[:, 0].tolist(), stereo[:, 1].tolist()))
        stereo_rows = np.array([m for m in range(len(matches)) if int(matches[m, 1]) in right_of], dtype=np.intp)
        right_px = right.px[np.array([right_of[int(matches[m, 1])] for m in stereo_rows], dtype=np.intp)]
        match_rows = np.concatenate([np.arange(len(matches)), stereo_rows])
        is_right = np.arange(len(match_rows)) >= len(matches)
        measurements = Measurements(positions[matches[match_rows, 0]],
                                    np.vstack([left.px[matches[:, 1]], right_px.reshape(-1, 2)]), is_right)

        estimate = refine_pose(measurements, predicted, self.rig, self.solver.loss,
                               self.solver.settings(self.solver.tracking_iterations), self.cfg)
        self.solver.dump(estimate.result, f'track_{frame_index:06d}')

        left_inlier = np.zeros(len(matches), dtype=bool)
        left_inlier[match_rows[~is_right & estimate.inliers]] = True
        inlier_count = int(np.count_nonzero(left_inlier))
        if inlier_count < self.cfg.min_inliers:
            raise InsufficientMatches(f"{inlier_count} inliers")

        pose = estimate.pose
        tracked_ids = point_ids[matches[left_inlier, 0]]
        tracked_count, reference_count = self._reference_counts(snapshot, pose, tracked_ids, inlier_count)
        reference_id, reference_pose = self.state.last_keyframe_id, self._reference_pose(snapshot)

        keyframe = None
        if (reference_count == 0 or inlier_count < self.cfg.keyframe_min_tracked
                or keyframe_decision(tracked_count, reference_count, self.cfg.keyframe_ratio)):
            feature_point_ids = np.full(len(left), -1, dtype=np.intp)
            feature_point_ids[matches[left_inlier, 1]] = tracked_ids
            keyframe = self._make_keyframe(frame_index, frame.timestamp, pose, left, right, stereo,
                                           feature_point_ids)
            logger.info("Frame %d promoted to keyframe %d (%d of %d visible reference points, %d tracked)",
                        frame_index, keyframe.id, tracked_count, reference_count, inlier_count)
            reference_id, reference_pose = keyframe.id, pose

        self._advance(pose, frame_index, keyframe,
                      inlier_count if keyframe is not None else tracked_count,
                      max(len(stereo), inlier_count) if keyframe is not None else reference_count)
        logger.debug("Frame %d: %d matches, %d inliers, mean error %.3f px",
                     frame_index, len(matches), inlier_count, estimate.mean_error)
        return TrackResult(frame_index, frame.timestamp, pose, keyframe, len(matches), inlier_count,
                           tracked_count, reference_count, reference_id, pose.compose(reference_pose.inverse()))

    def _track_events(self, frame: FusionFrame, frame_index: int, snapshot: MapSnapshot,
                      predicted: Pose) -> TrackResult:
        """Pose from the event images alone; the frame never becomes a keyframe."""
        assert frame.events_left is not None and frame.events_right is not None
        positions = np.array([p.position for p in snapshot.points.values()]).reshape(-1, 3)
        images = {Side.LEFT: frame.events_left, Side.RIGHT: frame.events_right}
        points = {side: positions[in_view(self.rig, predicted, positions, self.params, side)] for side in Side}
        if len(points[Side.LEFT]) < self.cfg.min_inliers:
            raise self._lost(frame_index, f"{len(points[Side.LEFT])} map points in view for event alignment")
        problem = EventAlignmentProblem(self.rig, points,
                                        {side: event_surface(images[side], self.cfg.event_sigma) for side in Side})
        try:
            result = lm_minimize(problem, predicted, None, self.solver.settings(self.solver.tracking_iterations))
        except HybridPtamError as e:
            raise self._lost(frame_index, f"event alignment failed: {e}") from e
        self.solver.dump(result, f'events_{frame_index:06d}')

        supported = problem.support(result.state, self.cfg.event_support)
        if supported < self.cfg.min_inliers:
            raise self._lost(frame_index, f"{supported} map points on events")
        pose = result.state
        reference_pose = self._reference_pose(snapshot)
        self._advance(pose, frame_index, None, self.state.tracked_count, self.state.reference_count)
        logger.debug("Frame %d aligned to events: %d of %d map points supported, cost %.4f -> %.4f",
                     frame_index, supported, len(points[Side.LEFT]), result.initial_cost, result.cost)
        return TrackResult(frame_index, frame.timestamp, pose, None, 0, supported, self.state.tracked_count,
                           self.state.reference_count, self.state.last_keyframe_id,
                           pose.compose(reference_pose.inverse()), events_only=True)

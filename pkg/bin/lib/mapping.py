"""
Keyframes, map points and the shared map.

Keyframe and point records are immutable; every change produces new records
that replace the old ones in a single locked commit. Readers take a snapshot
(a shallow copy of the id-indexed dictionaries) and never see a half-applied
update.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from lib.errors import ConfigError, SolverError
from lib.features import FeatureSet, MatchingParams
from lib.geometry import Pose, RigCalibration, Side, project_points, reprojection_jacobians, triangulate_many
from lib.solver import BlockLinearization, LMResult, SolverConfig, lm_minimize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MappingConfig:
    window_size: int = 10
    sigma_px: float = 1.0
    depth_weighting: bool = True
    triangulation_error: float = 2.0
    cull_error: float = 4.0

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError(f"mapping.window_size must be at least 1 (got {self.window_size})")
        if not (self.sigma_px > 0 and self.triangulation_error > 0 and self.cull_error > 0):
            raise ConfigError("mapping.sigma_px, mapping.triangulation_error and mapping.cull_error must be positive")


@dataclass(frozen=True, eq=False)
class Observation:
    keyframe_id: int
    side: Side
    px: np.ndarray


@dataclass(frozen=True, eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observations: Tuple[Observation, ...]
    depth_uncertainty: float
    intensity: float = 0.5

    @property
    def reference_keyframe(self) -> int:
        return self.observations[0].keyframe_id

    def observed_by(self) -> List[int]:
        return sorted({o.keyframe_id for o in self.observations})


@dataclass(frozen=True, eq=False)
class Keyframe:
    id: int
    frame_index: int
    timestamp: float
    pose: Pose
    features_left: FeatureSet
    features_right: FeatureSet
    stereo_matches: np.ndarray
    feature_point_ids: np.ndarray
    embedding: np.ndarray
    loop_generation: int = 0

    def point_ids(self) -> List[int]:
        return sorted(int(i) for i in self.feature_point_ids if i >= 0)

    def right_px_for(self, left_index: int) -> Optional[np.ndarray]:
        rows = np.nonzero(self.stereo_matches[:, 0] == left_index)[0]
        if len(rows) == 0:
            return None
        return self.features_right.px[self.stereo_matches[rows[0], 1]]


@dataclass(frozen=True, eq=False)
class MapSnapshot:
    keyframes: Dict[int, Keyframe]
    points: Dict[int, MapPoint]
    version: int
    loop_generation: int

    def keyframe_ids(self) -> List[int]:
        return sorted(self.keyframes)

    def window(self, size: int) -> List[int]:
        return self.keyframe_ids()[-size:]

    def latest_keyframe(self) -> Optional[Keyframe]:
        ids = self.keyframe_ids()
        return self.keyframes[ids[-1]] if ids else None

    def points_observed_by(self, keyframe_ids: Iterable[int]) -> List[int]:
        wanted = set(keyframe_ids)
        return sorted(pid for pid, point in self.points.items()
                      if any(o.keyframe_id in wanted for o in point.observations))

    def covisibility(self) -> Dict[Tuple[int, int], int]:
        shared: Dict[Tuple[int, int], int] = {}
        for point in self.points.values():
            observers = point.observed_by()
            for i, a in enumerate(observers):
                for b in observers[i + 1:]:
                    shared[(a, b)] = shared.get((a, b), 0) + 1
                    shared[(b, a)] = shared.get((b, a), 0) + 1
        return shared


def check_integrity(snapshot: MapSnapshot) -> List[str]:
    """Referential problems in a map snapshot; empty when the map is consistent."""
    problems = []
    for pid, point in snapshot.points.items():
        if not point.observations:
            problems.append(f"point {pid} has no observations")
        if not np.all(np.isfinite(point.position)):
            problems.append(f"point {pid} has a non-finite position")
        for observation in point.observations:
            if observation.keyframe_id not in snapshot.keyframes:
                problems.append(f"point {pid} observed by missing keyframe {observation.keyframe_id}")
    for kid, keyframe in snapshot.keyframes.items():
        for pid in keyframe.point_ids():
            point = snapshot.points.get(pid)
            if point is None:
                problems.append(f"keyframe {kid} references missing point {pid}")
            elif kid not in point.observed_by():
                problems.append(f"keyframe {kid} references point {pid} that has no observation from it")
    covisibility = snapshot.covisibility()
    for (a, b), count in covisibility.items():
        if covisibility.get((b, a)) != count:
            problems.append(f"covisibility between {a} and {b} is not symmetric")
    return problems


class SharedMap:
    def __init__(self):
        self._lock = threading.RLock()
        self._keyframes: Dict[int, Keyframe] = {}
        self._points: Dict[int, MapPoint] = {}
        self._next_keyframe_id = 0
        self._next_point_id = 0
        self.version = 0
        self.loop_generation = 0
        self._corrections: Dict[int, Pose] = {}

    @contextmanager
    def locked(self) -> Iterator['SharedMap']:
        """Hold the commit lock across a read-modify-commit sequence."""
        with self._lock:
            yield self

    def snapshot(self) -> MapSnapshot:
        with self._lock:
            return MapSnapshot(dict(self._keyframes), dict(self._points), self.version, self.loop_generation)

    def allocate_keyframe_id(self) -> int:
        with self._lock:
            self._next_keyframe_id += 1
            return self._next_keyframe_id - 1

    def allocate_point_ids(self, count: int) -> List[int]:
        with self._lock:
            start = self._next_point_id
            self._next_point_id += count
            return list(range(start, start + count))

    def commit(self, keyframes: Iterable[Keyframe] = (), points: Iterable[MapPoint] = (),
               removed_points: Iterable[int] = (), base: Optional[MapSnapshot] = None,
               loop_closure: bool = False, correction: Optional[Pose] = None) -> bool:
        """
        Atomically replace records. With ``base`` the commit is refused if a loop
        correction landed after that snapshot was taken. A loop-closure commit
        records ``correction``, the world transform applied to the newest part
        of the map, for keyframes that were promoted before it landed.
        """
        with self._lock:
            if base is not None and base.loop_generation != self.loop_generation:
                logger.warning("Dropping map update based on version %d: loop correction %d landed meanwhile",
                               base.version, self.loop_generation)
                return False
            for keyframe in keyframes:
                self._keyframes[keyframe.id] = keyframe
            for point in points:
                self._points[point.id] = point
            for pid in removed_points:
                self._points.pop(pid, None)
            self.version += 1
            if loop_closure:
                self.loop_generation += 1
                self._corrections[self.loop_generation] = correction or Pose.identity()
            return True

    def correction_since(self, generation: int) -> Pose:
        with self._lock:
            total = Pose.identity()
            for later in range(generation + 1, self.loop_generation + 1):
                total = self._corrections[later].compose(total)
            return total


def depth_uncertainty(depth: np.ndarray, focal: float, baseline: float, sigma_px: float) -> np.ndarray:
    return np.asarray(depth, dtype=float) ** 2 * sigma_px / (focal * baseline)


def _sample_intensity(image: Optional[np.ndarray], px: np.ndarray) -> np.ndarray:
    if image is None:
        return np.full(len(px), 0.5)
    cols = np.clip(np.round(px[:, 0]).astype(int), 0, image.shape[1] - 1)
    rows = np.clip(np.round(px[:, 1]).astype(int), 0, image.shape[0] - 1)
    return image[rows, cols]


def insert_keyframe(shared: SharedMap, keyframe: Keyframe, rig: RigCalibration, params: MatchingParams,
                    cfg: MappingConfig, image: Optional[np.ndarray] = None) -> List[int]:
    """
    Add a keyframe, extend tracked points with its observations and triangulate
    its stereo pairs that are not yet associated with map points.
    """
    with shared.locked():
        if keyframe.loop_generation != shared.loop_generation:
            correction = shared.correction_since(keyframe.loop_generation)
            keyframe = replace(keyframe, pose=keyframe.pose.compose(correction.inverse()),
                               loop_generation=shared.loop_generation)
        return _insert_locked(shared, keyframe, rig, params, cfg, image)


def _insert_locked(shared: SharedMap, keyframe: Keyframe, rig: RigCalibration, params: MatchingParams,
                   cfg: MappingConfig, image: Optional[np.ndarray]) -> List[int]:
    snapshot = shared.snapshot()
    point_ids = keyframe.feature_point_ids.copy()
    updated: Dict[int, MapPoint] = {}

    for left_index in np.nonzero(point_ids >= 0)[0]:
        point = snapshot.points.get(int(point_ids[left_index]))
        if point is None:
            point_ids[left_index] = -1
            continue
        new_observations = [Observation(keyframe.id, Side.LEFT, keyframe.features_left.px[left_index])]
        right_px = keyframe.right_px_for(int(left_index))
        if right_px is not None:
            new_observations.append(Observation(keyframe.id, Side.RIGHT, right_px))
        updated[point.id] = replace(point, observations=point.observations + tuple(new_observations),
                                    descriptor=keyframe.features_left.descriptors[left_index])

    fresh = keyframe.stereo_matches[point_ids[keyframe.stereo_matches[:, 0]] < 0] \
        if len(keyframe.stereo_matches) else np.zeros((0, 2), dtype=np.intp)
    new_ids: List[int] = []
    if len(fresh):
        px_l = keyframe.features_left.px[fresh[:, 0]]
        px_r = keyframe.features_right.px[fresh[:, 1]]
        in_left, valid = triangulate_many(rig.cam_left, rig.cam_right, rig.T_lr, px_l, px_r)
        depth = in_left[:, 2]
        valid &= (depth >= params.frustum_near) & (depth <= params.frustum_far)
        reproj_l, _ = project_points(rig.cam_left, Pose.identity(), np.where(valid[:, None], in_left, 1.0))
        reproj_r, _ = project_points(rig.cam_right, rig.T_lr, np.where(valid[:, None], in_left, 1.0))
        error = np.maximum(np.linalg.norm(reproj_l - px_l, axis=1), np.linalg.norm(reproj_r - px_r, axis=1))
        valid &= error <= cfg.triangulation_error
        keep = np.nonzero(valid)[0]
        sigma = depth_uncertainty(depth[keep], rig.cam_left.fx, rig.baseline, cfg.sigma_px)
        world = keyframe.pose.inverse().transform(in_left[keep]) if len(keep) else np.zeros((0, 3))
        intensity = _sample_intensity(image, px_l[keep])
        new_ids = shared.allocate_point_ids(len(keep))
        for n, (pid, row) in enumerate(zip(new_ids, keep)):
            left_index, right_index = fresh[row]
            point_ids[left_index] = pid
            updated[pid] = MapPoint(
                id=pid, position=world[n], descriptor=keyframe.features_left.descriptors[left_index],
                observations=(Observation(keyframe.id, Side.LEFT, px_l[row]),
                              Observation(keyframe.id, Side.RIGHT, px_r[row])),
                depth_uncertainty=float(sigma[n]), intensity=float(intensity[n]))

    shared.commit(keyframes=[replace(keyframe, feature_point_ids=point_ids)], points=updated.values())
    logger.info("Keyframe %d (frame %d): %d tracked points, %d new points",
                keyframe.id, keyframe.frame_index, len(updated) - len(new_ids), len(new_ids))
    return new_ids


class WindowProblem:
    """Reprojection residuals of windowed points in windowed keyframes; slot 0 holds the fixed pose."""

    def __init__(self, rig: RigCalibration, fixed_pose: Pose, slots: np.ndarray, right: np.ndarray,
                 point_index: np.ndarray, px: np.ndarray, sqrt_weights: np.ndarray):
        self.rig = rig
        self.fixed_pose = fixed_pose
        self.slots = slots
        self.right = right
        self.point_index = point_index
        self.px = px
        self.sqrt_weights = sqrt_weights
        self.groups = [(slot, side, np.nonzero((slots == slot) & (right == (side == Side.RIGHT)))[0])
                       for slot in np.unique(slots) for side in (Side.LEFT, Side.RIGHT)]

    def _pose(self, state, slot: int) -> Pose:
        return self.fixed_pose if slot == 0 else state[0][slot - 1]

    def _evaluate(self, state, with_jacobians: bool):
        poses, points = state
        residuals = np.zeros((len(self.px), 2))
        jac_pose = np.zeros((len(self.px), 2, 6))
        jac_point = np.zeros((len(self.px), 2, 3))
        for slot, side, rows in self.groups:
            if len(rows) == 0:
                continue
            predicted, j_pose, j_point = reprojection_jacobians(
                self.rig.camera(side), self._pose(state, slot), points[self.point_index[rows]],
                self.rig.extrinsic(side))
            scale = self.sqrt_weights[rows]
            residuals[rows] = (self.px[rows] - predicted) * scale[:, None]
            if with_jacobians:
                jac_pose[rows] = -j_pose * scale[:, None, None]
                jac_point[rows] = -j_point * scale[:, None, None]
        return residuals, jac_pose, jac_point, len(poses), len(points)

    def residuals(self, state) -> np.ndarray:
        return self._evaluate(state, False)[0]

    def linearize(self, state) -> BlockLinearization:
        residuals, jac_pose, jac_point, n_poses, n_points = self._evaluate(state, True)
        return BlockLinearization(residuals, jac_pose, jac_point, self.slots - 1, self.point_index,
                                  n_poses, n_points)

    def retract(self, state, step: np.ndarray):
        poses, points = state
        n = len(poses)
        return ([pose.retract(step[6 * i:6 * i + 6]) for i, pose in enumerate(poses)],
                points + step[6 * n:].reshape(-1, 3))


@dataclass(frozen=True)
class BundleReport:
    keyframes: int
    points: int
    observations: int
    initial_cost: float
    final_cost: float
    accepted_steps: int
    committed: bool
    status: str


def build_window_problem(snapshot: MapSnapshot, rig: RigCalibration, cfg: MappingConfig):
    window = snapshot.window(cfg.window_size)
    slot_of = {kid: slot for slot, kid in enumerate(window)}
    candidates = snapshot.points_observed_by(window)
    point_ids = []
    rows = []
    for pid in candidates:
        in_window = [o for o in snapshot.points[pid].observations if o.keyframe_id in slot_of]
        if len(in_window) < 2:
            continue
        rows.extend((len(point_ids), o) for o in in_window)
        point_ids.append(pid)
    if not rows:
        return window, point_ids, None, None

    sigma = np.array([snapshot.points[pid].depth_uncertainty for pid in point_ids])
    if cfg.depth_weighting and np.all(sigma > 0):
        point_weights = np.median(sigma) / sigma
    else:
        point_weights = np.ones(len(point_ids))
    point_index = np.array([index for index, _ in rows], dtype=np.intp)
    problem = WindowProblem(
        rig, snapshot.keyframes[window[0]].pose,
        np.array([slot_of[o.keyframe_id] for _, o in rows], dtype=np.intp),
        np.array([o.side == Side.RIGHT for _, o in rows]),
        point_index,
        np.array([o.px for _, o in rows], dtype=float),
        point_weights[point_index])
    state = ([snapshot.keyframes[kid].pose for kid in window[1:]],
             np.array([snapshot.points[pid].position for pid in point_ids]))
    return window, point_ids, problem, state


def local_bundle_adjust(shared: SharedMap, rig: RigCalibration, cfg: MappingConfig,
                        solver: SolverConfig) -> BundleReport:
    """Jointly refine the windowed poses (oldest held fixed) and the points they observe."""
    snapshot = shared.snapshot()
    window, point_ids, problem, state = build_window_problem(snapshot, rig, cfg)
    if problem is None:
        return BundleReport(len(window), 0, 0, 0.0, 0.0, 0, False, 'empty')
    try:
        result: LMResult = lm_minimize(problem, state, solver.loss, solver.settings(solver.ba_iterations))
    except SolverError as e:
        logger.warning("Local bundle adjustment failed, map left unchanged: %s", e)
        return BundleReport(len(window), len(point_ids), len(problem.px), float('nan'), float('nan'), 0, False,
                            'failed')
    solver.dump(result, f'ba_{snapshot.version:06d}')
    committed = False
    if result.accepted_steps:
        poses, points = result.state
        keyframes = [replace(snapshot.keyframes[kid], pose=pose) for kid, pose in zip(window[1:], poses)]
        moved = [replace(snapshot.points[pid], position=position) for pid, position in zip(point_ids, points)]
        committed = shared.commit(keyframes=keyframes, points=moved, base=snapshot)
    logger.debug("Local BA over %d keyframes / %d points: cost %.4g -> %.4g (%s)",
                 len(window), len(point_ids), result.initial_cost, result.cost, result.status.value)
    return BundleReport(len(window), len(point_ids), len(problem.px), result.initial_cost, result.cost,
                        result.accepted_steps, committed, result.status.value)


def reprojection_errors(snapshot: MapSnapshot, rig: RigCalibration, point: MapPoint) -> np.ndarray:
    errors = []
    for observation in point.observations:
        keyframe = snapshot.keyframes[observation.keyframe_id]
        pose = keyframe.pose if observation.side == Side.LEFT else rig.T_lr.compose(keyframe.pose)
        px, depth = project_points(rig.camera(observation.side), pose, point.position[None, :])
        errors.append(np.linalg.norm(px[0] - observation.px) if depth[0] > 0 else np.inf)
    return np.asarray(errors)


def cull_points(shared: SharedMap, rig: RigCalibration, cfg: MappingConfig) -> List[int]:
    """Drop poorly supported points and points whose mean reprojection error exceeds the ceiling."""
    snapshot = shared.snapshot()
    window = set(snapshot.window(cfg.window_size))
    removed = []
    for pid, point in snapshot.points.items():
        departed = not window.intersection(point.observed_by())
        if (len(point.observations) < 2 and departed) or \
                np.mean(reprojection_errors(snapshot, rig, point)) > cfg.cull_error:
            removed.append(pid)
    if not removed:
        return removed
    gone = set(removed)
    touched = []
    for keyframe in snapshot.keyframes.values():
        mask = np.isin(keyframe.feature_point_ids, list(gone))
        if mask.any():
            ids = keyframe.feature_point_ids.copy()
            ids[mask] = -1
            touched.append(replace(keyframe, feature_point_ids=ids))
    shared.commit(keyframes=touched, removed_points=removed, base=snapshot)
    logger.debug("Culled %d points", len(removed))
    return removed


class Mapper:
    """Consumes promoted keyframes: insertion, local bundle adjustment, culling."""

    def __init__(self, shared: SharedMap, rig: RigCalibration, params: MatchingParams, cfg: MappingConfig,
                 solver: SolverConfig):
        self.shared = shared
        self.rig = rig
        self.params = params
        self.cfg = cfg
        self.solver = solver
        self.reports: List[BundleReport] = []

    def process(self, keyframe: Keyframe, image: Optional[np.ndarray] = None) -> BundleReport:
        insert_keyframe(self.shared, keyframe, self.rig, self.params, self.cfg, image)
        report = local_bundle_adjust(self.shared, self.rig, self.cfg, self.solver)
        cull_points(self.shared, self.rig, self.cfg)
        self.reports.append(report)
        return report


def dump_map(snapshot: MapSnapshot, path: Union[str, Path], anchor: Optional[Pose] = None,
             append: bool = False) -> None:
    """
    Point cloud as ``x y z r g b`` lines, grey levels taken from the observed intensity.
    ``anchor`` moves the snapshot's world frame into the output frame.
    """
    with Path(path).open('a' if append else 'w', encoding='utf-8') as f:
        for pid in sorted(snapshot.points):
            point = snapshot.points[pid]
            grey = int(np.clip(round(point.intensity * 255), 0, 255))
            x, y, z = point.position if anchor is None else anchor.transform(point.position)
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {grey} {grey} {grey}\n")

"""
Place recognition on mean-descriptor embeddings, geometric verification and
pose-graph correction of the accumulated drift.
"""
import csv
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from lib.errors import ConfigError, DegenerateConfiguration, HybridPtamError, SolverError, VerificationFailed
from lib.evaluation import umeyama_align
from lib.features import MatchingParams, mutual_best
from lib.geometry import Pose, RigCalibration, project_points, triangulate_many
from lib.mapping import Keyframe, MapSnapshot, SharedMap
from lib.solver import DenseLinearization, LMResult, SolverConfig, lm_minimize
from lib.tracking import Measurements, TrackingConfig, refine_pose

logger = logging.getLogger(__name__)

LOOP_LOG_HEADER = ['query_kf', 'match_kf', 'distance', 'inliers', 'verified']
NUMERIC_STEP = 1e-6


@dataclass(frozen=True)
class LoopClosureConfig:
    enabled: bool = True
    max_distance: float = 0.3
    min_gap: int = 30
    ransac_iterations: int = 200
    inlier_threshold: float = 2.0
    min_inliers: int = 15
    max_candidates: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.max_distance > 0:
            raise ConfigError(f"loop_closure.max_distance must be positive (got {self.max_distance})")
        if self.min_gap < 1 or self.ransac_iterations < 1 or self.max_candidates < 1:
            raise ConfigError("loop_closure.min_gap, loop_closure.ransac_iterations and "
                              "loop_closure.max_candidates must be at least 1")
        if self.min_inliers < 4:
            raise ConfigError(f"loop_closure.min_inliers must be at least 4 (got {self.min_inliers})")


@dataclass(frozen=True, eq=False)
class LoopCandidate:
    query_kf: int
    match_kf: int
    distance: float
    verified: bool = False
    inliers: int = 0
    relative_pose: Optional[Pose] = None


def detect_loop(query_kf: int, query_embedding: np.ndarray, database: Mapping[int, np.ndarray],
                cfg: LoopClosureConfig) -> List[LoopCandidate]:
    """Keyframes at least ``min_gap`` ids older whose embedding lies within ``max_distance``, closest first."""
    older = sorted(kid for kid in database if query_kf - kid >= cfg.min_gap)
    if not older:
        return []
    distances = np.linalg.norm(np.array([database[kid] for kid in older]) - query_embedding, axis=1)
    order = np.argsort(distances, kind='stable')
    return [LoopCandidate(query_kf, older[i], float(distances[i])) for i in order if distances[i] <= cfg.max_distance]


def _query_structure(query: Keyframe, rig: RigCalibration, params: MatchingParams):
    """Left-feature indices of the query's stereo pairs and their triangulated points in the query frame."""
    if len(query.stereo_matches) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros((0, 3))
    px_l = query.features_left.px[query.stereo_matches[:, 0]]
    px_r = query.features_right.px[query.stereo_matches[:, 1]]
    points, valid = triangulate_many(rig.cam_left, rig.cam_right, rig.T_lr, px_l, px_r)
    valid &= (points[:, 2] >= params.frustum_near) & (points[:, 2] <= params.frustum_far)
    return query.stereo_matches[valid, 0], points[valid]


def _match_structure(match: Keyframe, snapshot: MapSnapshot):
    """Left-feature indices of the match keyframe's map points and those points in the match frame."""
    indices = np.array([i for i, pid in enumerate(match.feature_point_ids) if pid >= 0 and pid in snapshot.points],
                       dtype=np.intp)
    world = np.array([snapshot.points[int(match.feature_point_ids[i])].position for i in indices]).reshape(-1, 3)
    return indices, match.pose.transform(world) if len(world) else world


def verify_loop(candidate: LoopCandidate, query: Keyframe, match: Keyframe, snapshot: MapSnapshot,
                rig: RigCalibration, params: MatchingParams, cfg: LoopClosureConfig, solver: SolverConfig,
                distance_scale: float = 1.0) -> LoopCandidate:
    """
    Estimate the query camera pose relative to the match camera.

    Hypotheses come from rigid alignments of three stereo-triangulated 3D-3D
    correspondences; each is scored by reprojecting the match keyframe's
    points into the query image. The best hypothesis is refined on its inliers.
    """
    query_idx, query_points = _query_structure(query, rig, params)
    match_idx, match_points = _match_structure(match, snapshot)
    if len(query_idx) == 0 or len(match_idx) == 0:
        raise VerificationFailed(f"Keyframes {query.id} and {match.id} share no 3D structure")
    distances = cdist(query.features_left.descriptors[query_idx], match.features_left.descriptors[match_idx])
    distances[distances > params.descriptor_threshold(distance_scale)] = np.inf
    pairs = mutual_best(distances)
    if len(pairs) < cfg.min_inliers:
        raise VerificationFailed(f"Keyframes {query.id} and {match.id}: {len(pairs)} correspondences, "
                                 f"need {cfg.min_inliers}")
    source = match_points[pairs[:, 1]]
    target = query_points[pairs[:, 0]]
    px = query.features_left.px[query_idx[pairs[:, 0]]]

    def inliers_of(pose: Pose) -> np.ndarray:
        predicted, depth = project_points(rig.cam_left, pose, source)
        error = np.linalg.norm(predicted - px, axis=1)
        return (depth > 0) & (error < cfg.inlier_threshold)

    rng = np.random.default_rng(cfg.seed)
    best_pose, best_inliers = None, np.zeros(len(pairs), dtype=bool)
    for _ in range(cfg.ransac_iterations):
        sample = rng.choice(len(pairs), size=3, replace=False)
        try:
            hypothesis = umeyama_align(source[sample], target[sample]).as_pose()
        except DegenerateConfiguration:
            continue
        inliers = inliers_of(hypothesis)
        if np.count_nonzero(inliers) > np.count_nonzero(best_inliers):
            best_pose, best_inliers = hypothesis, inliers
    if best_pose is None or np.count_nonzero(best_inliers) < cfg.min_inliers:
        raise VerificationFailed(f"Keyframes {query.id} and {match.id}: {np.count_nonzero(best_inliers)} "
                                 f"RANSAC inliers, need {cfg.min_inliers}")

    try:
        estimate = refine_pose(Measurements.left(source[best_inliers], px[best_inliers]), best_pose, rig,
                               solver.loss, solver.settings(solver.tracking_iterations), TrackingConfig())
    except HybridPtamError as e:
        raise VerificationFailed(f"Keyframes {query.id} and {match.id}: refinement failed: {e}") from e
    inliers = int(np.count_nonzero(inliers_of(estimate.pose)))
    if inliers < cfg.min_inliers:
        raise VerificationFailed(f"Keyframes {query.id} and {match.id}: {inliers} inliers after refinement, "
                                 f"need {cfg.min_inliers}")
    return replace(candidate, verified=True, inliers=inliers, relative_pose=estimate.pose)


class EdgeKind(Enum):
    ODOMETRY = 'odometry'
    LOOP = 'loop'


@dataclass(frozen=True, eq=False)
class PoseGraphEdge:
    """Constraint ``T_i^-1 T_j = measurement`` between camera-to-world node poses."""
    i: int
    j: int
    measurement: Pose
    weight: float
    kind: EdgeKind


@dataclass(frozen=True, eq=False)
class PoseGraph:
    node_ids: List[int]
    poses: List[Pose]
    edges: List[PoseGraphEdge]

    @staticmethod
    def chain(node_ids: Sequence[int], poses: Sequence[Pose], weight: float = 1.0) -> 'PoseGraph':
        """Nodes connected by odometry edges that agree with the given camera-to-world poses."""
        edges = [PoseGraphEdge(k, k + 1, poses[k].inverse().compose(poses[k + 1]), weight, EdgeKind.ODOMETRY)
                 for k in range(len(poses) - 1)]
        return PoseGraph(list(node_ids), list(poses), edges)

    @staticmethod
    def from_snapshot(snapshot: MapSnapshot) -> 'PoseGraph':
        ids = snapshot.keyframe_ids()
        return PoseGraph.chain(ids, [snapshot.keyframes[kid].pose.inverse() for kid in ids])

    def add_loop(self, candidate: LoopCandidate) -> None:
        if candidate.relative_pose is None:
            raise ValueError("Only verified loop candidates can be added")
        index = {kid: n for n, kid in enumerate(self.node_ids)}
        self.edges.append(PoseGraphEdge(index[candidate.match_kf], index[candidate.query_kf],
                                        candidate.relative_pose.inverse(), float(candidate.inliers), EdgeKind.LOOP))


def _matrices(poses: Sequence[Pose]) -> np.ndarray:
    return np.array([p.as_matrix() for p in poses]).reshape(-1, 4, 4)


def _perturbations(h: float) -> np.ndarray:
    deltas = np.concatenate([h * np.eye(6), -h * np.eye(6)])
    matrices = np.tile(np.eye(4), (12, 1, 1))
    matrices[:, :3, :3] = Rotation.from_rotvec(deltas[:, :3]).as_matrix()
    matrices[:, :3, 3] = deltas[:, 3:]
    return matrices


def _edge_error(measurement_inverse: np.ndarray, pose_i: np.ndarray, pose_j: np.ndarray) -> np.ndarray:
    error = measurement_inverse @ np.linalg.inv(pose_i) @ pose_j
    shape = error.shape[:-2]
    rotvec = Rotation.from_matrix(error[..., :3, :3].reshape(-1, 3, 3)).as_rotvec().reshape(*shape, 3)
    return np.concatenate([rotvec, error[..., :3, 3]], axis=-1)


class PoseGraphProblem:
    """Weighted edge errors over the free nodes; node 0 stays where it is."""

    def __init__(self, graph: PoseGraph, h: float = NUMERIC_STEP):
        self.fixed = graph.poses[0]
        self.i = np.array([e.i for e in graph.edges], dtype=np.intp)
        self.j = np.array([e.j for e in graph.edges], dtype=np.intp)
        self.measurement_inverse = _matrices([e.measurement.inverse() for e in graph.edges])
        self.sqrt_weight = np.sqrt([e.weight for e in graph.edges]).reshape(-1, 1)
        self.h = h
        self.steps = _perturbations(h)

    def _all(self, state: Sequence[Pose]) -> np.ndarray:
        return _matrices([self.fixed, *state])

    def residuals(self, state: Sequence[Pose]) -> np.ndarray:
        poses = self._all(state)
        return self.sqrt_weight * _edge_error(self.measurement_inverse, poses[self.i], poses[self.j])

    def linearize(self, state: Sequence[Pose]) -> DenseLinearization:
        poses = self._all(state)
        inverse = self.measurement_inverse[:, None]
        moved_i = _edge_error(inverse, self.steps[None] @ poses[self.i][:, None], poses[self.j][:, None])
        moved_j = _edge_error(inverse, poses[self.i][:, None], self.steps[None] @ poses[self.j][:, None])
        jacobian = np.zeros((len(self.i), 6, 6 * len(state)))
        for node, moved in ((self.i, moved_i), (self.j, moved_j)):
            block = np.swapaxes(moved[:, :6] - moved[:, 6:], 1, 2) / (2 * self.h)
            for e in np.nonzero(node > 0)[0]:
                start = 6 * (node[e] - 1)
                jacobian[e, :, start:start + 6] += block[e]
        return DenseLinearization(self.residuals(state), jacobian * self.sqrt_weight[:, :, None])

    @staticmethod
    def retract(state: Sequence[Pose], step: np.ndarray) -> List[Pose]:
        return [pose.retract(step[6 * k:6 * k + 6]) for k, pose in enumerate(state)]


def optimize_pose_graph(graph: PoseGraph, solver: SolverConfig) -> Tuple[List[Pose], LMResult]:
    """Corrected camera-to-world poses of every node, node 0 unchanged."""
    if len(graph.poses) < 2:
        raise ValueError("A pose graph needs at least two nodes")
    result = lm_minimize(PoseGraphProblem(graph), list(graph.poses[1:]), None,
                         solver.settings(solver.pose_graph_iterations))
    solver.dump(result, f'pose_graph_{len(graph.poses):05d}')
    return [graph.poses[0], *result.state], result


def apply_correction(shared: SharedMap, graph: PoseGraph, corrected: Sequence[Pose]) -> Dict[int, Pose]:
    """
    Move keyframes to their corrected poses and carry every point along with
    the keyframe of its first observation. Keyframes promoted after the graph
    was built move with the newest node.
    """
    with shared.locked():
        snapshot = shared.snapshot()
        moves: Dict[int, Pose] = {}
        for kid, pose in zip(graph.node_ids, corrected):
            if kid in snapshot.keyframes:
                moves[kid] = pose.compose(snapshot.keyframes[kid].pose)
        newest = moves[graph.node_ids[-1]] if graph.node_ids[-1] in moves else Pose.identity()
        for kid in snapshot.keyframes:
            moves.setdefault(kid, newest)
        generation = shared.loop_generation + 1
        keyframes = [replace(kf, pose=kf.pose.compose(moves[kid].inverse()), loop_generation=generation)
                     for kid, kf in snapshot.keyframes.items()]
        points = [replace(p, position=moves[p.reference_keyframe].transform(p.position))
                  for p in snapshot.points.values() if p.reference_keyframe in moves]
        shared.commit(keyframes=keyframes, points=points, loop_closure=True, correction=newest)
    return moves


def write_loop_log(candidates: Sequence[LoopCandidate], path: Union[str, Path]) -> None:
    with Path(path).open('w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(LOOP_LOG_HEADER)
        for c in candidates:
            writer.writerow([c.query_kf, c.match_kf, f'{c.distance:.6f}', c.inliers, int(c.verified)])


class LoopCloser:
    """Looks for a loop at every new keyframe and distributes the drift when one is verified."""

    def __init__(self, shared: SharedMap, rig: RigCalibration, params: MatchingParams, cfg: LoopClosureConfig,
                 solver: SolverConfig, distance_scale: float = 1.0):
        self.shared = shared
        self.rig = rig
        self.params = params
        self.cfg = cfg
        self.solver = solver
        self.distance_scale = distance_scale
        self.events: List[LoopCandidate] = []
        self.loops: List[LoopCandidate] = []

    def process(self, keyframe_id: int) -> Optional[LoopCandidate]:
        snapshot = self.shared.snapshot()
        query = snapshot.keyframes.get(keyframe_id)
        if query is None:
            return None
        database = {kid: kf.embedding for kid, kf in snapshot.keyframes.items() if kid != keyframe_id}
        for candidate in detect_loop(keyframe_id, query.embedding, database, self.cfg)[:self.cfg.max_candidates]:
            try:
                verified = verify_loop(candidate, query, snapshot.keyframes[candidate.match_kf], snapshot, self.rig,
                                       self.params, self.cfg, self.solver, self.distance_scale)
            except VerificationFailed as e:
                logger.warning("Loop candidate rejected: %s", e)
                self.events.append(candidate)
                continue
            self.events.append(verified)
            if self._close(snapshot, verified):
                return verified
        return None

    def _close(self, snapshot: MapSnapshot, loop: LoopCandidate) -> bool:
        graph = PoseGraph.from_snapshot(snapshot)
        for earlier in [*self.loops, loop]:
            if earlier.query_kf in graph.node_ids and earlier.match_kf in graph.node_ids:
                graph.add_loop(earlier)
        try:
            corrected, result = optimize_pose_graph(graph, self.solver)
        except SolverError as e:
            logger.warning("Pose graph optimization failed, map left unchanged: %s", e)
            return False
        moves = apply_correction(self.shared, graph, corrected)
        self.loops.append(loop)
        shift = max((float(np.linalg.norm(m.translation)) for m in moves.values()), default=0.0)
        logger.info("Closed loop %d -> %d with %d inliers: graph cost %.4g -> %.4g, largest shift %.3f m",
                    loop.query_kf, loop.match_kf, loop.inliers, result.initial_cost, result.cost, shift)
        return True

from dataclasses import replace

import numpy as np
import pytest

from lib.errors import ConfigError, NoFeatures, VerificationFailed
from lib.features import FeatureSet, MatchingParams, compute_embedding
from lib.geometry import PinholeCamera, Pose, RigCalibration, project_points, relative_error
from lib.loopclosure import (EdgeKind, LoopCandidate, LoopCloser, LoopClosureConfig, PoseGraph, PoseGraphEdge,
                             PoseGraphProblem, apply_correction, detect_loop, optimize_pose_graph, verify_loop,
                             write_loop_log)
from lib.mapping import Keyframe, MappingConfig, SharedMap, insert_keyframe
from lib.solver import SolverConfig, check_jacobian

CAM = PinholeCamera(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120)
RIG = RigCalibration(cam_left=CAM, cam_right=CAM, dvs_left=CAM, dvs_right=CAM, T_cd_left=Pose.identity(),
                     T_cd_right=Pose.identity(), T_lr=Pose(np.eye(3), [-0.1, 0.0, 0.0]))


def unit_rows(rng, count, dimension=16):
    rows = rng.normal(size=(count, dimension))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_keyframe(shared, pose, points, descriptors, point_ids=None):
    px_l, _ = project_points(CAM, pose, points)
    px_r, _ = project_points(CAM, RIG.T_lr.compose(pose), points)
    count = len(points)
    left = FeatureSet(px_l, descriptors, np.ones(count))
    ids = np.full(count, -1, dtype=np.intp) if point_ids is None else np.asarray(point_ids, dtype=np.intp)
    kid = shared.allocate_keyframe_id()
    return Keyframe(id=kid, frame_index=kid, timestamp=0.1 * kid, pose=pose, features_left=left,
                    features_right=FeatureSet(px_r, descriptors, np.ones(count)),
                    stereo_matches=np.column_stack([np.arange(count), np.arange(count)]),
                    feature_point_ids=ids, embedding=compute_embedding(left))


@pytest.fixture(name='scene')
def fixture_scene():
    rng = np.random.default_rng(0)
    points = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-0.7, 0.7, 40), rng.uniform(3, 6, 40)])
    return points, unit_rows(rng, 40)


@pytest.fixture(name='mapped')
def fixture_mapped(scene):
    points, descriptors = scene
    shared = SharedMap()
    first = make_keyframe(shared, Pose.identity(), points, descriptors)
    insert_keyframe(shared, first, RIG, MatchingParams(), MappingConfig())
    return shared, shared.snapshot().keyframes[first.id].feature_point_ids


def test_should_embed_identical_descriptors_as_themselves():
    descriptor = unit_rows(np.random.default_rng(1), 1)[0]
    features = FeatureSet(np.zeros((5, 2)), np.tile(descriptor, (5, 1)), np.ones(5))
    np.testing.assert_allclose(compute_embedding(features), descriptor, atol=1e-15)


def test_should_embed_orthonormal_pair_at_equal_angles():
    embedding = compute_embedding(FeatureSet(np.zeros((2, 2)), np.eye(4)[:2], np.ones(2)))
    np.testing.assert_allclose(embedding, [np.sqrt(0.5), np.sqrt(0.5), 0.0, 0.0])


def test_should_match_naive_mean_and_ignore_order():
    rng = np.random.default_rng(2)
    descriptors = unit_rows(rng, 100)
    total = np.zeros(16)
    for row in descriptors:
        total += row
    naive = total / np.linalg.norm(total)
    features = FeatureSet(np.zeros((100, 2)), descriptors, np.ones(100))
    np.testing.assert_allclose(compute_embedding(features), naive, atol=1e-12)
    shuffled = features.subset(rng.permutation(100))
    np.testing.assert_allclose(compute_embedding(shuffled), naive, atol=1e-12)


def test_should_refuse_to_embed_nothing():
    with pytest.raises(NoFeatures):
        compute_embedding(FeatureSet.empty(16))


def test_should_validate_loop_config():
    with pytest.raises(ConfigError, match="min_inliers"):
        LoopClosureConfig(min_inliers=2)


def test_should_detect_close_embeddings_beyond_gap():
    database = {0: np.array([1.0, 0.0]), 5: np.array([0.96, 0.28]), 20: np.array([0.0, 1.0]),
                39: np.array([1.0, 0.0])}
    candidates = detect_loop(40, np.array([1.0, 0.0]), database, LoopClosureConfig(min_gap=30))
    assert [(c.match_kf, c.verified) for c in candidates] == [(0, False), (5, False)]
    assert candidates[0].distance == 0.0
    assert candidates[1].distance == pytest.approx(np.linalg.norm([0.04, 0.28]))


def test_should_find_nothing_in_distinct_database():
    database = {k: e for k, e in enumerate(np.eye(16)[:10])}
    assert not detect_loop(100, np.eye(16)[12], database, LoopClosureConfig(min_gap=1))


def test_should_verify_revisit_from_same_pose(scene, mapped):
    points, descriptors = scene
    shared, ids = mapped
    query = make_keyframe(shared, Pose.identity(), points, descriptors)
    snapshot = shared.snapshot()
    verified = verify_loop(LoopCandidate(query.id, 0, 0.0), query, snapshot.keyframes[0], snapshot, RIG,
                           MatchingParams(), LoopClosureConfig(), SolverConfig())
    assert verified.verified
    assert verified.inliers == np.count_nonzero(ids >= 0) > 30
    np.testing.assert_allclose(verified.relative_pose.as_matrix(), np.eye(4), atol=1e-6)


def test_should_recover_known_relative_pose(scene, mapped):
    points, descriptors = scene
    shared, _ = mapped
    revisit = Pose.from_rotvec([0.0, 0.0, np.pi / 6], [0.0, 0.0, -1.0])
    query = make_keyframe(shared, revisit, points, descriptors)
    snapshot = shared.snapshot()
    verified = verify_loop(LoopCandidate(query.id, 0, 0.0), query, snapshot.keyframes[0], snapshot, RIG,
                           MatchingParams(), LoopClosureConfig(), SolverConfig())
    translation_error, rotation_error = relative_error(verified.relative_pose, revisit)
    assert translation_error < 1e-3
    assert rotation_error < np.radians(0.1)


def test_should_reject_geometrically_different_scene(scene, mapped):
    _, descriptors = scene
    shared, _ = mapped
    rng = np.random.default_rng(4)
    elsewhere = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-0.7, 0.7, 40), rng.uniform(3, 6, 40)])
    query = make_keyframe(shared, Pose.identity(), elsewhere, descriptors)
    snapshot = shared.snapshot()
    with pytest.raises(VerificationFailed, match="inliers"):
        verify_loop(LoopCandidate(query.id, 0, 0.0), query, snapshot.keyframes[0], snapshot, RIG, MatchingParams(),
                    LoopClosureConfig(), SolverConfig())


def circle_poses(count, radius=5.0):
    """Camera-to-world poses on a horizontal circle, looking along the direction of travel."""
    poses = []
    for k in range(count):
        angle = 2 * np.pi * k / count
        centre = [radius * np.sin(angle), 0.0, radius * (1 - np.cos(angle))]
        poses.append(Pose.from_rotvec([0.0, -angle, 0.0], centre))
    return poses


def drifting_graph(truth, scale=1.01, yaw=0.002):
    bias = Pose.from_rotvec([0.0, yaw, 0.0], [0.0, 0.0, 0.0])
    poses = [truth[0]]
    for k in range(len(truth) - 1):
        step = truth[k].inverse().compose(truth[k + 1])
        drifted = bias.compose(Pose(step.rotation, scale * step.translation))
        poses.append(poses[-1].compose(drifted))
    return PoseGraph.chain(range(len(truth)), poses)


def test_should_keep_consistent_chain_in_place():
    graph = PoseGraph.chain(range(6), circle_poses(6))
    corrected, _ = optimize_pose_graph(graph, SolverConfig())
    for before, after in zip(graph.poses, corrected):
        np.testing.assert_allclose(after.as_matrix(), before.as_matrix(), atol=1e-9)


def test_should_not_correct_consistent_loop():
    truth = circle_poses(8)
    graph = PoseGraph.chain(range(8), truth)
    graph.edges.append(PoseGraphEdge(0, 7, truth[0].inverse().compose(truth[7]), 50.0, EdgeKind.LOOP))
    corrected, _ = optimize_pose_graph(graph, SolverConfig())
    for before, after in zip(truth, corrected):
        np.testing.assert_allclose(after.as_matrix(), before.as_matrix(), atol=1e-9)


def test_should_spread_drift_around_closed_circle():
    truth = circle_poses(20)
    graph = drifting_graph(truth)
    graph.edges.append(PoseGraphEdge(0, 19, truth[0].inverse().compose(truth[19]), 100.0, EdgeKind.LOOP))
    before = np.linalg.norm(graph.poses[-1].translation - truth[-1].translation)
    corrected, result = optimize_pose_graph(graph, SolverConfig())
    after = np.linalg.norm(corrected[-1].translation - truth[-1].translation)
    assert corrected[0] is graph.poses[0]
    assert after * 5 <= before
    assert result.cost <= result.initial_cost


def test_should_differentiate_edge_errors_accurately():
    graph = drifting_graph(circle_poses(5))
    graph.edges.append(PoseGraphEdge(0, 4, Pose.from_rotvec([0.1, 0.2, 0.0], [0.3, 0.0, 0.1]), 4.0, EdgeKind.LOOP))
    assert check_jacobian(PoseGraphProblem(graph), list(graph.poses[1:])) < 1e-5


def test_should_carry_points_with_reference_keyframe(scene, mapped):
    points, descriptors = scene
    shared, ids = mapped
    second = make_keyframe(shared, Pose(np.eye(3), [-0.2, 0.0, 0.0]), points, descriptors, point_ids=ids)
    insert_keyframe(shared, second, RIG, MatchingParams(), MappingConfig())
    snapshot = shared.snapshot()
    graph = PoseGraph.from_snapshot(snapshot)
    shifted = Pose(np.eye(3), [0.2, 0.0, 0.05]).compose(graph.poses[1])
    apply_correction(shared, graph, [graph.poses[0], shifted])
    corrected = shared.snapshot()
    assert corrected.loop_generation == snapshot.loop_generation + 1
    np.testing.assert_allclose(corrected.keyframes[1].pose.inverse().as_matrix(), shifted.as_matrix(), atol=1e-12)
    for pid in ids[ids >= 0]:
        np.testing.assert_array_equal(corrected.points[pid].position, snapshot.points[pid].position)
    np.testing.assert_allclose(shared.correction_since(snapshot.loop_generation).translation, [0.2, 0.0, 0.05],
                               atol=1e-12)


def test_should_close_loop_on_revisit(scene, mapped, tmp_path):
    points, descriptors = scene
    shared, ids = mapped
    for _ in range(30):
        insert_keyframe(shared, make_keyframe(shared, Pose.identity(), points, descriptors, point_ids=ids), RIG,
                        MatchingParams(), MappingConfig())
    drifted = Pose(np.eye(3), [0.0, 0.0, -0.05])
    query = replace(make_keyframe(shared, Pose.identity(), points, descriptors), pose=drifted)
    shared.commit(keyframes=[query])
    closer = LoopCloser(shared, RIG, MatchingParams(), LoopClosureConfig(), SolverConfig())
    loop = closer.process(query.id)
    assert loop is not None
    assert loop.match_kf == 0
    corrected = shared.snapshot().keyframes[query.id].pose
    assert np.linalg.norm(corrected.translation) < 0.5 * 0.05
    assert shared.snapshot().loop_generation == 1
    write_loop_log(closer.events, tmp_path / 'loops.csv')
    lines = (tmp_path / 'loops.csv').read_text().splitlines()
    assert lines[0] == 'query_kf,match_kf,distance,inliers,verified'
    assert lines[1].startswith(f'{query.id},0,0.000000,')
    assert lines[1].endswith(',1')


def test_should_leave_map_alone_without_candidates(mapped):
    shared, _ = mapped
    closer = LoopCloser(shared, RIG, MatchingParams(), LoopClosureConfig(), SolverConfig())
    assert closer.process(0) is None
    assert shared.snapshot().loop_generation == 0

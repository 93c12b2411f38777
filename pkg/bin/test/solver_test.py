from unittest import mock

import numpy as np
import pytest

from lib.errors import ConfigError, NonFiniteResidual, SingularNormalEquations
from lib.geometry import PinholeCamera, Pose, reprojection_jacobians
from lib.solver import (BlockLinearization, BlockNormalEquations, DenseLinearization, HuberLoss, LMSettings, Status,
                        check_jacobian, dump_trace, huber, lm_minimize, solve_dense, solve_schur)


class LinearProblem:
    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def residuals(self, x):
        return (self.a @ x - self.b).reshape(-1, 1)

    def linearize(self, x):
        return DenseLinearization(self.residuals(x), self.a.reshape(len(self.b), 1, -1))

    def retract(self, x, step):
        return x + step


class Rosenbrock:
    def residuals(self, x):
        return np.array([[10.0 * (x[1] - x[0] ** 2)], [1.0 - x[0]]])

    def linearize(self, x):
        return DenseLinearization(self.residuals(x), np.array([[[-20.0 * x[0], 10.0]], [[-1.0, 0.0]]]))

    def retract(self, x, step):
        return x + step


class WrongJacobian(LinearProblem):
    def linearize(self, x):
        return DenseLinearization(self.residuals(x), 1.5 * self.a.reshape(len(self.b), 1, -1))


class Reprojection:
    """Pose-and-point reprojection residuals in the block layout used by bundle adjustment."""

    def __init__(self, camera, observations):
        self.camera = camera
        self.observations = observations

    def residuals(self, state):
        poses, points = state
        return np.array([z - self.camera.project_camera(poses[p].transform(points[m]))
                         for p, m, z in self.observations])

    def linearize(self, state):
        poses, points = state
        jac_pose, jac_point = [], []
        for p, m, _ in self.observations:
            _, jp, jx = reprojection_jacobians(self.camera, poses[p], points[m][None, :])
            jac_pose.append(-jp[0])
            jac_point.append(-jx[0])
        return BlockLinearization(self.residuals(state), np.array(jac_pose), np.array(jac_point),
                                  np.array([p for p, _, _ in self.observations]),
                                  np.array([m for _, m, _ in self.observations]), len(poses), len(points))

    def retract(self, state, step):
        poses, points = state
        n = len(poses)
        new_poses = [pose.retract(step[6 * i:6 * i + 6]) for i, pose in enumerate(poses)]
        return new_poses, points + step[6 * n:].reshape(-1, 3)


def test_should_be_quadratic_at_zero():
    loss, weight = huber(0.0, 1.0)
    assert loss == 0.0
    assert weight == 1.0


def test_should_be_continuous_at_the_branch_point():
    delta = 1.3
    below_loss, below_weight = huber(delta ** 2 * (1 - 1e-15), delta)
    above_loss, above_weight = huber(delta ** 2 * (1 + 1e-15), delta)
    assert below_loss == pytest.approx(above_loss, abs=1e-12)
    assert below_weight == pytest.approx(above_weight, abs=1e-12)


def test_should_be_linear_above_delta():
    loss, weight = huber(4.0, 1.0)
    assert loss == pytest.approx(3.0)
    assert weight == pytest.approx(0.5)


def test_should_reject_non_positive_delta():
    with pytest.raises(ConfigError):
        HuberLoss(0.0)


def test_should_validate_damping_factors():
    with pytest.raises(ConfigError, match="damping factors"):
        LMSettings(damping_up=0.5)


def test_should_solve_linear_problem_in_one_step():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 3))
    truth = np.array([1.0, -2.0, 0.5])
    result = lm_minimize(LinearProblem(a, a @ truth), np.zeros(3), settings=LMSettings(initial_damping=1e-15))
    np.testing.assert_allclose(result.state, truth, atol=1e-10)
    assert result.accepted_steps == 1
    assert result.status == Status.CONVERGED


def test_should_minimize_rosenbrock():
    result = lm_minimize(Rosenbrock(), np.array([-1.2, 1.0]), settings=LMSettings(max_iterations=500))
    np.testing.assert_allclose(result.state, [1.0, 1.0], atol=1e-6)


def test_should_stop_immediately_at_optimum():
    a = np.eye(3)
    result = lm_minimize(LinearProblem(a, [1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    assert result.status == Status.CONVERGED
    assert result.accepted_steps == 0
    assert result.trace == []


def test_should_only_accept_decreasing_steps_and_adapt_damping():
    settings = LMSettings(max_iterations=200, initial_damping=1e3)
    result = lm_minimize(Rosenbrock(), np.array([-1.2, 1.0]), settings=settings)
    cost = result.initial_cost
    for entry in result.trace:
        if entry.accepted:
            assert entry.cost < cost
            cost = entry.cost
    for before, after in zip(result.trace, result.trace[1:]):
        factor = settings.damping_down if before.accepted else settings.damping_up
        assert after.damping == pytest.approx(before.damping * factor)


def test_should_reject_non_finite_start():
    with pytest.raises(NonFiniteResidual):
        lm_minimize(LinearProblem(np.eye(2), [np.nan, 0.0]), np.zeros(2))


def test_should_raise_when_system_stays_singular():
    with mock.patch('lib.solver.solve_dense', side_effect=np.linalg.LinAlgError("singular")):
        with pytest.raises(SingularNormalEquations):
            lm_minimize(LinearProblem(np.eye(2), [1.0, 1.0]), np.zeros(2), settings=LMSettings(max_iterations=50))


def test_should_down_weight_outliers_with_huber():
    a = np.ones((10, 1))
    b = np.array([1.0] * 9 + [100.0])
    plain = lm_minimize(LinearProblem(a, b), np.zeros(1), settings=LMSettings(max_iterations=50))
    robust = lm_minimize(LinearProblem(a, b), np.zeros(1), HuberLoss(1.0), LMSettings(max_iterations=50))
    assert plain.state[0] == pytest.approx(10.9, abs=1e-6)
    assert abs(robust.state[0] - 1.0) < 0.2
    assert robust.weights[-1] < 0.05


def test_should_measure_exact_jacobian_of_linear_problem():
    rng = np.random.default_rng(1)
    problem = LinearProblem(rng.normal(size=(5, 4)), rng.normal(size=5))
    assert check_jacobian(problem, rng.normal(size=4)) < 1e-8


def test_should_detect_wrong_jacobian():
    problem = WrongJacobian(np.eye(3), np.zeros(3))
    assert check_jacobian(problem, np.ones(3)) > 1e-2


def make_ba_instance(rng, n_poses, n_points, noise=0.0):
    camera = PinholeCamera(fx=300.0, fy=300.0, cx=160.0, cy=120.0, width=320, height=240)
    poses = [Pose.from_rotvec(rng.normal(scale=0.05, size=3), [0.3 * i, rng.normal(scale=0.05), 0.0])
             for i in range(n_poses)]
    points = np.column_stack([rng.uniform(-2, 2, n_points), rng.uniform(-1.5, 1.5, n_points),
                              rng.uniform(4, 8, n_points)])
    observations = [(p, m, camera.project_camera(poses[p].transform(points[m])) + rng.normal(scale=noise, size=2))
                    for p in range(n_poses) for m in range(n_points)]
    return Reprojection(camera, observations), (poses, points)


def test_should_measure_reprojection_jacobian_accurately():
    rng = np.random.default_rng(2)
    problem, state = make_ba_instance(rng, 2, 4)
    assert check_jacobian(problem, state, h=1e-6) < 1e-5


@pytest.mark.parametrize('seed', range(50))
def test_should_match_dense_solve_with_schur(seed):
    rng = np.random.default_rng(seed)
    problem, (poses, points) = make_ba_instance(rng, int(rng.integers(1, 11)), int(rng.integers(1, 51)), noise=1.0)
    perturbed = (poses, points + rng.normal(scale=0.05, size=points.shape))
    linearization = problem.linearize(perturbed)
    system = linearization.normal_equations(np.ones(len(linearization.residuals)))
    hessian, gradient = system.dense()
    for damping in (1e-3, 1.0):
        schur = solve_schur(system, damping)
        dense = solve_dense(hessian, gradient, damping)
        assert np.max(np.abs(schur - dense)) <= 1e-8 * max(1.0, np.max(np.abs(dense)))


def test_should_reduce_to_pose_solve_without_points():
    rng = np.random.default_rng(3)
    root = rng.normal(size=(6, 6))
    block = root @ root.T + 6 * np.eye(6)
    gradient = rng.normal(size=6)
    system = BlockNormalEquations(block[None], np.zeros((1, 0, 6, 3)), np.zeros((0, 3, 3)), gradient[None],
                                  np.zeros((0, 3)))
    np.testing.assert_allclose(solve_schur(system), -np.linalg.solve(block, gradient), atol=1e-12)


def test_should_divide_by_diagonal_for_diagonal_system():
    pose_diagonal = np.arange(1.0, 7.0)
    point_diagonal = np.array([[2.0, 4.0, 8.0], [1.0, 3.0, 5.0]])
    pose_gradient = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    point_gradient = np.array([[2.0, 2.0, 2.0], [3.0, 3.0, 3.0]])
    system = BlockNormalEquations(np.diag(pose_diagonal)[None], np.zeros((1, 2, 6, 3)),
                                  np.stack([np.diag(d) for d in point_diagonal]), pose_gradient, point_gradient)
    expected = -np.concatenate([pose_gradient[0] / pose_diagonal, (point_gradient / point_diagonal).ravel()])
    np.testing.assert_allclose(solve_schur(system), expected)


def test_should_refine_bundle_with_block_solver():
    rng = np.random.default_rng(4)
    problem, (poses, points) = make_ba_instance(rng, 3, 20)
    start = ([poses[0]] + [p.retract(rng.normal(scale=0.01, size=6)) for p in poses[1:]],
             points + rng.normal(scale=0.05, size=points.shape))
    result = lm_minimize(problem, start, settings=LMSettings(max_iterations=30))
    assert result.cost < 1e-3 * result.initial_cost


def test_should_dump_trace_as_csv(tmp_path):
    result = lm_minimize(Rosenbrock(), np.array([-1.2, 1.0]), settings=LMSettings(max_iterations=5))
    dump_trace(result.trace, tmp_path / 'trace.csv')
    lines = (tmp_path / 'trace.csv').read_text().splitlines()
    assert lines[0] == 'iter,cost,damping,step_norm,accepted'
    assert len(lines) == len(result.trace) + 1

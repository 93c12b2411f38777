"""
Robust Levenberg-Marquardt least squares.

A problem supplies residual blocks (B x d), a linearization and a retraction
that applies a tangent-space step to its state. Linearizations either carry a
dense Jacobian or per-observation pose/point Jacobian blocks; the latter are
solved by eliminating the points (Schur complement). Robust losses act on the
squared norm of each residual block through iteratively reweighted normal
equations.
"""
import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Protocol, Tuple, Union

import numpy as np
from scipy import linalg

from lib.errors import ConfigError, NonFiniteResidual, SingularNormalEquations

logger = logging.getLogger(__name__)

MIN_DIAGONAL = 1e-9


def huber(residual_sq, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Huber loss of a squared residual norm and its IRLS weight (derivative w.r.t. the squared norm)."""
    s = np.asarray(residual_sq, dtype=float)
    root = np.sqrt(s)
    quadratic = s <= delta * delta
    loss = np.where(quadratic, s, 2.0 * delta * root - delta * delta)
    weight = np.where(quadratic, 1.0, delta / np.where(quadratic, 1.0, root))
    return loss, weight


@dataclass(frozen=True)
class HuberLoss:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"Huber delta must be positive (got {self.delta})")

    def __call__(self, residual_sq) -> Tuple[np.ndarray, np.ndarray]:
        return huber(residual_sq, self.delta)


def evaluate_loss(residuals: np.ndarray, loss: Optional[HuberLoss]) -> Tuple[float, np.ndarray]:
    """Total cost (half the summed loss) and per-block weights."""
    squared = np.sum(np.asarray(residuals, dtype=float).reshape(len(residuals), -1) ** 2, axis=1)
    if loss is None:
        return 0.5 * float(squared.sum()), np.ones_like(squared)
    values, weights = loss(squared)
    return 0.5 * float(values.sum()), weights


@dataclass(frozen=True)
class LMSettings:
    max_iterations: int = 10
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    cost_tolerance: float = 1e-12
    step_tolerance: float = 1e-12
    gradient_tolerance: float = 1e-10
    max_damping: float = 1e12

    def __post_init__(self):
        if self.max_iterations <= 0 or not self.initial_damping > 0:
            raise ConfigError("solver max_iterations and initial_damping must be positive")
        if not self.damping_up > 1.0 > self.damping_down > 0:
            raise ConfigError(f"solver damping factors need up > 1 > down > 0 "
                              f"(got {self.damping_up}, {self.damping_down})")
        if min(self.cost_tolerance, self.step_tolerance, self.gradient_tolerance) <= 0:
            raise ConfigError("solver tolerances must be positive")


class Status(Enum):
    CONVERGED = 'converged'
    MAX_ITERATIONS = 'max_iterations'
    STALLED = 'stalled'


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class LMResult:
    state: Any
    cost: float
    initial_cost: float
    status: Status
    weights: np.ndarray
    trace: List[TraceEntry] = field(default_factory=list)

    @property
    def accepted_steps(self) -> int:
        return sum(1 for entry in self.trace if entry.accepted)


def _damped(matrix: np.ndarray, damping: float) -> np.ndarray:
    diagonal = np.maximum(np.diag(matrix), MIN_DIAGONAL)
    return matrix + damping * np.diag(diagonal)


def solve_dense(hessian: np.ndarray, gradient: np.ndarray, damping: float = 0.0) -> np.ndarray:
    factor = linalg.cho_factor(_damped(hessian, damping) if damping > 0 else hessian)
    return -linalg.cho_solve(factor, gradient)


@dataclass(frozen=True, eq=False)
class DenseNormalEquations:
    hessian: np.ndarray
    gradient: np.ndarray

    def solve(self, damping: float) -> np.ndarray:
        return solve_dense(self.hessian, self.gradient, damping)

    def gradient_vector(self) -> np.ndarray:
        return self.gradient

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.hessian, self.gradient


@dataclass(frozen=True, eq=False)
class BlockNormalEquations:
    """Pose blocks ``pose_pose`` (P,6,6), coupling ``pose_point`` (P,M,6,3), point blocks ``point_point`` (M,3,3)."""
    pose_pose: np.ndarray
    pose_point: np.ndarray
    point_point: np.ndarray
    pose_gradient: np.ndarray
    point_gradient: np.ndarray

    @property
    def n_poses(self) -> int:
        return self.pose_pose.shape[0]

    @property
    def n_points(self) -> int:
        return self.point_point.shape[0]

    def solve(self, damping: float) -> np.ndarray:
        return solve_schur(self, damping)

    def gradient_vector(self) -> np.ndarray:
        return np.concatenate([self.pose_gradient.ravel(), self.point_gradient.ravel()])

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        p, m = self.n_poses, self.n_points
        size = 6 * p + 3 * m
        hessian = np.zeros((size, size))
        for i in range(p):
            hessian[6 * i:6 * i + 6, 6 * i:6 * i + 6] = self.pose_pose[i]
            for j in range(m):
                block = self.pose_point[i, j]
                hessian[6 * i:6 * i + 6, 6 * p + 3 * j:6 * p + 3 * j + 3] = block
                hessian[6 * p + 3 * j:6 * p + 3 * j + 3, 6 * i:6 * i + 6] = block.T
        for j in range(m):
            hessian[6 * p + 3 * j:6 * p + 3 * j + 3, 6 * p + 3 * j:6 * p + 3 * j + 3] = self.point_point[j]
        return hessian, np.concatenate([self.pose_gradient.ravel(), self.point_gradient.ravel()])


def _damp_blocks(blocks: np.ndarray, damping: float) -> np.ndarray:
    if damping == 0.0 or len(blocks) == 0:
        return blocks
    size = blocks.shape[-1]
    diagonal = np.maximum(np.einsum('nii->ni', blocks), MIN_DIAGONAL)
    return blocks + damping * diagonal[:, :, None] * np.eye(size)[None, :, :]


def solve_schur(system: BlockNormalEquations, damping: float = 0.0) -> np.ndarray:
    """Damped solve eliminating point blocks first; returns the pose steps then the point steps."""
    p, m = system.n_poses, system.n_points
    pose_pose = _damp_blocks(system.pose_pose, damping)
    point_point = _damp_blocks(system.point_point, damping)
    try:
        point_inverse = np.linalg.inv(point_point) if m else np.zeros((0, 3, 3))
        reduced = np.zeros((p, 6, p, 6))
        for i in range(p):
            reduced[i, :, i, :] = pose_pose[i]
        reduced -= np.einsum('pmij,mjk,qmlk->piql', system.pose_point, point_inverse, system.pose_point,
                             optimize=True)
        rhs = system.pose_gradient.reshape(p, 6) - np.einsum('pmij,mjk,mk->pi', system.pose_point, point_inverse,
                                                             system.point_gradient.reshape(m, 3))
        if p:
            factor = linalg.cho_factor(reduced.reshape(6 * p, 6 * p))
            pose_step = -linalg.cho_solve(factor, rhs.ravel()).reshape(p, 6)
        else:
            pose_step = np.zeros((0, 6))
    except np.linalg.LinAlgError as e:
        raise SingularNormalEquations(str(e)) from e
    coupled = system.point_gradient.reshape(m, 3) + np.einsum('pmij,pi->mj', system.pose_point, pose_step)
    point_step = -np.einsum('mjk,mk->mj', point_inverse, coupled)
    return np.concatenate([pose_step.ravel(), point_step.ravel()])


@dataclass(frozen=True, eq=False)
class DenseLinearization:
    residuals: np.ndarray
    jacobian: np.ndarray

    def normal_equations(self, weights: np.ndarray) -> DenseNormalEquations:
        rows = self.jacobian.reshape(-1, self.jacobian.shape[-1])
        row_weights = np.repeat(weights, self.residuals.reshape(len(weights), -1).shape[1])
        weighted = rows * row_weights[:, None]
        return DenseNormalEquations(weighted.T @ rows, weighted.T @ self.residuals.ravel())

    def dense_jacobian(self) -> np.ndarray:
        return self.jacobian.reshape(-1, self.jacobian.shape[-1])


@dataclass(frozen=True, eq=False)
class BlockLinearization:
    """
    Residual blocks each touching at most one free pose and one free point.

    ``pose_index``/``point_index`` are -1 where a block's pose is held fixed or
    it has no point parameter.
    """
    residuals: np.ndarray
    jac_pose: np.ndarray
    jac_point: np.ndarray
    pose_index: np.ndarray
    point_index: np.ndarray
    n_poses: int
    n_points: int

    def normal_equations(self, weights: np.ndarray) -> BlockNormalEquations:
        p, m = self.n_poses, self.n_points
        weighted_pose = self.jac_pose * weights[:, None, None]
        weighted_point = self.jac_point * weights[:, None, None]
        has_pose = self.pose_index >= 0
        has_point = self.point_index >= 0
        both = has_pose & has_point

        pose_pose = np.zeros((p, 6, 6))
        pose_gradient = np.zeros((p, 6))
        np.add.at(pose_pose, self.pose_index[has_pose],
                  np.einsum('bki,bkj->bij', weighted_pose[has_pose], self.jac_pose[has_pose]))
        np.add.at(pose_gradient, self.pose_index[has_pose],
                  np.einsum('bki,bk->bi', weighted_pose[has_pose], self.residuals[has_pose]))

        point_point = np.zeros((m, 3, 3))
        point_gradient = np.zeros((m, 3))
        np.add.at(point_point, self.point_index[has_point],
                  np.einsum('bki,bkj->bij', weighted_point[has_point], self.jac_point[has_point]))
        np.add.at(point_gradient, self.point_index[has_point],
                  np.einsum('bki,bk->bi', weighted_point[has_point], self.residuals[has_point]))

        pose_point = np.zeros((p, m, 6, 3))
        np.add.at(pose_point, (self.pose_index[both], self.point_index[both]),
                  np.einsum('bki,bkj->bij', weighted_pose[both], self.jac_point[both]))
        return BlockNormalEquations(pose_pose, pose_point, point_point, pose_gradient, point_gradient)

    def dense_jacobian(self) -> np.ndarray:
        blocks, dim = self.residuals.shape
        jacobian = np.zeros((blocks, dim, 6 * self.n_poses + 3 * self.n_points))
        for b in range(blocks):
            if self.pose_index[b] >= 0:
                start = 6 * self.pose_index[b]
                jacobian[b, :, start:start + 6] = self.jac_pose[b]
            if self.point_index[b] >= 0:
                start = 6 * self.n_poses + 3 * self.point_index[b]
                jacobian[b, :, start:start + 3] = self.jac_point[b]
        return jacobian.reshape(blocks * dim, -1)


Linearization = Union[DenseLinearization, BlockLinearization]


class LeastSquaresProblem(Protocol):
    def residuals(self, state: Any) -> np.ndarray:
        ...

    def linearize(self, state: Any) -> Linearization:
        ...

    def retract(self, state: Any, step: np.ndarray) -> Any:
        ...


def lm_minimize(problem: LeastSquaresProblem, state: Any, loss: Optional[HuberLoss] = None,
                settings: Optional[LMSettings] = None) -> LMResult:
    settings = settings or LMSettings()
    residuals = np.asarray(problem.residuals(state), dtype=float)
    if not np.all(np.isfinite(residuals)):
        raise NonFiniteResidual("Initial residuals are not finite")
    cost, weights = evaluate_loss(residuals, loss)
    initial_cost = cost
    damping = settings.initial_damping
    trace: List[TraceEntry] = []
    status = Status.MAX_ITERATIONS
    system = None

    for iteration in range(settings.max_iterations):
        if system is None:
            system = problem.linearize(state).normal_equations(weights)
            if np.max(np.abs(system.gradient_vector()), initial=0.0) <= settings.gradient_tolerance:
                status = Status.CONVERGED
                break
        try:
            step = system.solve(damping)
        except (np.linalg.LinAlgError, SingularNormalEquations) as e:
            damping *= settings.damping_up
            if damping > settings.max_damping:
                raise SingularNormalEquations(f"Damped normal equations stayed singular: {e}") from e
            trace.append(TraceEntry(iteration, cost, damping / settings.damping_up, float('nan'), False))
            continue

        candidate = problem.retract(state, step)
        candidate_residuals = np.asarray(problem.residuals(candidate), dtype=float)
        step_norm = float(np.linalg.norm(step))
        if np.all(np.isfinite(candidate_residuals)):
            candidate_cost, candidate_weights = evaluate_loss(candidate_residuals, loss)
        else:
            candidate_cost, candidate_weights = float('inf'), weights
        accepted = candidate_cost < cost
        trace.append(TraceEntry(iteration, candidate_cost, damping, step_norm, accepted))

        if accepted:
            decrease = (cost - candidate_cost) / max(cost, 1e-300)
            state, cost, weights = candidate, candidate_cost, candidate_weights
            damping *= settings.damping_down
            system = None
            if decrease < settings.cost_tolerance or step_norm < settings.step_tolerance:
                status = Status.CONVERGED
                break
        else:
            damping *= settings.damping_up
            if damping > settings.max_damping:
                status = Status.STALLED
                break

    logger.debug("LM finished (%s) after %d attempts: cost %.6g -> %.6g",
                 status.value, len(trace), initial_cost, cost)
    return LMResult(state, cost, initial_cost, status, weights, trace)


def check_jacobian(problem: LeastSquaresProblem, state: Any, h: float = 1e-6) -> float:
    """Largest relative difference between the analytic Jacobian and central differences through ``retract``."""
    if not h > 0:
        raise ValueError(f"Finite-difference step must be positive (got {h})")
    analytic = problem.linearize(state).dense_jacobian()
    numeric = np.zeros_like(analytic)
    for k in range(analytic.shape[1]):
        step = np.zeros(analytic.shape[1])
        step[k] = h
        plus = np.asarray(problem.residuals(problem.retract(state, step)), dtype=float).ravel()
        minus = np.asarray(problem.residuals(problem.retract(state, -step)), dtype=float).ravel()
        numeric[:, k] = (plus - minus) / (2 * h)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale, initial=0.0))


def dump_trace(trace: List[TraceEntry], path: Union[str, Path]) -> None:
    with Path(path).open('w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['iter', 'cost', 'damping', 'step_norm', 'accepted'])
        for entry in trace:
            writer.writerow([entry.iteration, f'{entry.cost:.12g}', f'{entry.damping:.6g}',
                             f'{entry.step_norm:.6g}', int(entry.accepted)])


@dataclass(frozen=True)
class SolverConfig:
    huber_delta: float = 1.0
    initial_damping: float = 1e-4
    tracking_iterations: int = 10
    ba_iterations: int = 30
    pose_graph_iterations: int = 30
    trace_dir: Optional[str] = None

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ConfigError(f"solver.huber_delta must be positive (got {self.huber_delta})")
        if min(self.tracking_iterations, self.ba_iterations, self.pose_graph_iterations) <= 0:
            raise ConfigError("solver iteration budgets must be positive")
        if not self.initial_damping > 0:
            raise ConfigError(f"solver.initial_damping must be positive (got {self.initial_damping})")

    @property
    def loss(self) -> HuberLoss:
        return HuberLoss(self.huber_delta)

    def settings(self, iterations: int) -> LMSettings:
        return LMSettings(max_iterations=iterations, initial_damping=self.initial_damping)

    def dump(self, result: LMResult, name: str) -> None:
        if self.trace_dir is not None:
            path = Path(self.trace_dir)
            path.mkdir(parents=True, exist_ok=True)
            dump_trace(result.trace, path / f'{name}.csv')

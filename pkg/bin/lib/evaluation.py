"""
Trajectory accuracy: timestamp association, closed-form alignment, absolute
and relative errors.
"""
import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from lib.errors import DegenerateConfiguration, NoAssociations
from lib.geometry import Pose
from lib.trajectory import TrajectoryRecord

logger = logging.getLogger(__name__)

ASSOCIATION_WINDOW = 0.01
DEGENERATE_SINGULAR_RATIO = 1e-12


class AlignmentMode(Enum):
    SE3 = 'se3'
    SIM3 = 'sim3'


@dataclass(frozen=True, eq=False)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def as_pose(self) -> Pose:
        return Pose(self.rotation, self.translation)


def umeyama_align(source: np.ndarray, target: np.ndarray, with_scale: bool = False) -> Similarity:
    """Least-squares ``target ~ s * R @ source + t`` over paired 3D points."""
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) != len(target):
        raise DegenerateConfiguration(f"Point sets differ in size ({len(source)} vs {len(target)})")
    if len(source) < 3:
        raise DegenerateConfiguration(f"Alignment needs at least 3 pairs (got {len(source)})")
    mean_source, mean_target = source.mean(axis=0), target.mean(axis=0)
    centred_source, centred_target = source - mean_source, target - mean_target
    covariance = centred_target.T @ centred_source / len(source)
    u, singular, vt = np.linalg.svd(covariance)
    if not singular[1] > DEGENERATE_SINGULAR_RATIO * singular[0]:
        raise DegenerateConfiguration("Point pairs are collinear or coincident")
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt
    scale = 1.0
    if with_scale:
        scale = float(np.trace(np.diag(singular) @ sign) / np.mean(np.sum(centred_source ** 2, axis=1)))
    return Similarity(scale, rotation, mean_target - scale * rotation @ mean_source)


def associate(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
              max_difference: float = ASSOCIATION_WINDOW) -> np.ndarray:
    """Pairs (estimate index, ground-truth index) of nearest timestamps, each record used once."""
    if not estimate or not ground_truth:
        return np.zeros((0, 2), dtype=np.intp)
    gt_times = np.array([r.timestamp for r in ground_truth])
    est_times = np.array([r.timestamp for r in estimate])
    right = np.clip(np.searchsorted(gt_times, est_times), 1, len(gt_times) - 1) if len(gt_times) > 1 \
        else np.zeros(len(est_times), dtype=np.intp)
    left = np.maximum(right - 1, 0)
    nearest = np.where(np.abs(gt_times[left] - est_times) <= np.abs(gt_times[right] - est_times), left, right)
    difference = np.abs(gt_times[nearest] - est_times)
    pairs = []
    used = set()
    for i in np.argsort(difference, kind='stable'):
        if difference[i] > max_difference or nearest[i] in used:
            continue
        used.add(int(nearest[i]))
        pairs.append((int(i), int(nearest[i])))
    pairs.sort()
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def _positions(records: Sequence[TrajectoryRecord], indices: np.ndarray) -> np.ndarray:
    return np.array([records[i].pose.translation for i in indices]).reshape(-1, 3)


@dataclass(frozen=True)
class AteResult:
    rmse: float
    mean: float
    median: float
    std: float
    max: float
    n_pairs: int


@dataclass(frozen=True)
class RpeResult:
    rmse: float
    std: float
    n_pairs: int


def _pairs(estimate, ground_truth, minimum: int = 1) -> np.ndarray:
    pairs = associate(estimate, ground_truth)
    if len(pairs) < minimum:
        raise NoAssociations(f"Only {len(pairs)} poses associate within {ASSOCIATION_WINDOW * 1000:.0f} ms "
                             f"(need {minimum})")
    return pairs


def ate(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
        mode: AlignmentMode = AlignmentMode.SE3) -> AteResult:
    pairs = _pairs(estimate, ground_truth, 3)
    est, gt = _positions(estimate, pairs[:, 0]), _positions(ground_truth, pairs[:, 1])
    alignment = umeyama_align(est, gt, with_scale=mode == AlignmentMode.SIM3)
    errors = np.linalg.norm(gt - alignment.apply(est), axis=1)
    return AteResult(float(np.sqrt(np.mean(errors ** 2))), float(np.mean(errors)), float(np.median(errors)),
                     float(np.std(errors)), float(np.max(errors)), len(pairs))


def rpe(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord], delta: int = 1) -> RpeResult:
    """Translational error of relative motions ``delta`` associated poses apart."""
    if delta < 1:
        raise ValueError(f"RPE delta must be at least 1 (got {delta})")
    pairs = _pairs(estimate, ground_truth, delta + 1)
    errors = []
    for (ei, gi), (ej, gj) in zip(pairs[:-delta], pairs[delta:]):
        est_motion = estimate[ei].pose.inverse().compose(estimate[ej].pose)
        gt_motion = ground_truth[gi].pose.inverse().compose(ground_truth[gj].pose)
        errors.append(np.linalg.norm(gt_motion.inverse().compose(est_motion).translation))
    errors_array = np.asarray(errors)
    return RpeResult(float(np.sqrt(np.mean(errors_array ** 2))), float(np.std(errors_array)), len(errors))


def evaluate(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
             mode: AlignmentMode = AlignmentMode.SE3, delta: int = 1) -> Dict[str, Union[float, int, str]]:
    absolute = ate(estimate, ground_truth, mode)
    relative = rpe(estimate, ground_truth, delta)
    report: Dict[str, Union[float, int, str]] = {f'ate_{k}': v for k, v in asdict(absolute).items() if k != 'n_pairs'}
    report.update(rpe_rmse=relative.rmse, rpe_std=relative.std, rpe_delta=delta, n_pairs=absolute.n_pairs,
                  mode=mode.value)
    logger.info("ATE %.4f m, RPE %.4f m over %d pairs", absolute.rmse, relative.rmse, absolute.n_pairs)
    return report


def write_report(report: Dict, path: Union[str, Path]) -> None:
    with Path(path).open('w', encoding='utf-8') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write('\n')


def aligned_positions(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
                      mode: AlignmentMode = AlignmentMode.SE3) -> Tuple[np.ndarray, np.ndarray]:
    """Associated estimate positions after alignment, and the matching ground-truth positions."""
    pairs = _pairs(estimate, ground_truth, 3)
    est, gt = _positions(estimate, pairs[:, 0]), _positions(ground_truth, pairs[:, 1])
    return umeyama_align(est, gt, with_scale=mode == AlignmentMode.SIM3).apply(est), gt

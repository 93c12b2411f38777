"""
Synthetic stereo hybrid rig.

Landmarks are drawn as small anisotropic Gaussian blobs over a constant
background, seen by a stereo frame camera pair and a co-located stereo event
camera pair moving along a parametric path. Events come from per-pixel
log-intensity threshold crossings between finely spaced renders; frames can be
dimmed over chosen intervals while the events keep the undimmed radiance.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.calibration import dump_calibration
from lib.datasets import (CALIBRATION_FILE, EVENTS_LEFT_FILE, EVENTS_RIGHT_FILE, FRAME_TIMES_FILE,
                          FRAMES_LEFT_FILE, FRAMES_RIGHT_FILE, GROUND_TRUTH_FILE)
from lib.errors import ConfigError
from lib.events import EVENT_DTYPE, make_events, seconds_to_ns, write_events_binary
from lib.geometry import PinholeCamera, Pose, RigCalibration, Side, project_points
from lib.trajectory import TrajectoryRecord, write_tum

logger = logging.getLogger(__name__)

BLOB_EXTENT = 4.0
FRUSTUM_NEAR = 0.1
FRUSTUM_FAR = 30.0


def default_rig(baseline: float = 0.1) -> RigCalibration:
    cam = PinholeCamera(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120)
    return RigCalibration(cam_left=cam, cam_right=cam, dvs_left=cam, dvs_right=cam, T_cd_left=Pose.identity(),
                          T_cd_right=Pose.identity(), T_lr=Pose(np.eye(3), [-baseline, 0.0, 0.0]))


class TrajectoryKind(Enum):
    LINE = 'line'
    CIRCLE = 'circle'
    FIGURE_EIGHT = 'figure-eight'


@dataclass(frozen=True)
class TrajectorySpec:
    """A closed or open camera path starting at the world origin, looking down +z."""
    kind: TrajectoryKind = TrajectoryKind.FIGURE_EIGHT
    duration: float = 4.0
    rate: float = 30.0
    amplitude: float = 0.5
    yaw: float = 0.1
    pitch: float = 0.05

    def __post_init__(self):
        if not (self.duration > 0 and self.rate > 0 and self.amplitude > 0):
            raise ConfigError("simulator.duration, simulator.rate and simulator.amplitude must be positive")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.rate)) + 1

    def timestamps(self) -> np.ndarray:
        return np.arange(self.frame_count) / self.rate

    def pose_at(self, t: float) -> Pose:
        """Camera-to-world pose of the left frame camera."""
        phase = 2 * np.pi * t / self.duration
        a = self.amplitude
        if self.kind == TrajectoryKind.LINE:
            return Pose(np.eye(3), [a * t / self.duration, 0.0, 0.0])
        if self.kind == TrajectoryKind.CIRCLE:
            return Pose.from_rotvec([0.0, self.yaw * np.sin(phase), 0.0],
                                    [a * np.sin(phase), a * (1.0 - np.cos(phase)), 0.0])
        return Pose.from_rotvec([self.pitch * np.sin(2 * phase), self.yaw * np.sin(phase), 0.0],
                                [a * np.sin(phase), 0.5 * a * np.sin(2 * phase), 0.0])


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    event_jitter: float = 0.0
    contrast_threshold: float = 0.15

    def __post_init__(self):
        if self.pixel_sigma < 0 or self.event_jitter < 0:
            raise ConfigError("simulator noise levels must be non-negative")
        if not self.contrast_threshold > 0:
            raise ConfigError(f"simulator.contrast_threshold must be positive (got {self.contrast_threshold})")


@dataclass(frozen=True, eq=False)
class SceneSpec:
    landmarks: np.ndarray
    amplitudes: np.ndarray
    orientations: np.ndarray
    elongations: np.ndarray
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    rig: RigCalibration = field(default_factory=default_rig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    background: float = 0.05
    blob_sigma: float = 1.5
    dim_intervals: Tuple[Tuple[float, float], ...] = ()
    dim_factor: float = 0.05
    event_substeps: int = 4
    seed: int = 0

    def __post_init__(self):
        landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        object.__setattr__(self, 'landmarks', landmarks)
        for name in ('amplitudes', 'orientations', 'elongations'):
            values = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if len(values) != len(landmarks):
                raise ConfigError(f"simulator.{name} has {len(values)} entries for {len(landmarks)} landmarks")
            object.__setattr__(self, name, values)
        if not self.background > 0:
            raise ConfigError(f"simulator.background must be positive (got {self.background})")
        if not self.blob_sigma > 0 or np.any(self.elongations < 1.0):
            raise ConfigError("simulator.blob_sigma must be positive and elongations at least 1")
        if not 0.0 < self.dim_factor <= 1.0:
            raise ConfigError(f"simulator.dim_factor must lie in (0, 1] (got {self.dim_factor})")
        if self.event_substeps < 1:
            raise ConfigError(f"simulator.event_substeps must be at least 1 (got {self.event_substeps})")

    def blob_precision(self) -> np.ndarray:
        """Inverse pixel covariance (a, b, c) of each blob: a*dx^2 + 2*b*dx*dy + c*dy^2."""
        major = 1.0 / (self.blob_sigma * self.elongations) ** 2
        minor = 1.0 / self.blob_sigma ** 2
        cos, sin = np.cos(self.orientations), np.sin(self.orientations)
        return np.column_stack([cos ** 2 * major + sin ** 2 * minor,
                                cos * sin * (major - minor),
                                sin ** 2 * major + cos ** 2 * minor])

    def dimmed(self, t: float) -> bool:
        return any(start <= t < end for start, end in self.dim_intervals)


def make_scene(trajectory: Optional[TrajectorySpec] = None, landmark_count: int = 80, seed: int = 0,
               depth_range: Tuple[float, float] = (2.0, 6.0), spread: Tuple[float, float] = (2.5, 1.8),
               **kwargs) -> SceneSpec:
    """Landmarks scattered in a box ahead of the path's start, with random blob shapes."""
    rng = np.random.default_rng(seed)
    landmarks = np.column_stack([rng.uniform(-spread[0], spread[0], landmark_count),
                                 rng.uniform(-spread[1], spread[1], landmark_count),
                                 rng.uniform(depth_range[0], depth_range[1], landmark_count)])
    return SceneSpec(landmarks=landmarks, amplitudes=rng.uniform(0.3, 0.8, landmark_count),
                     orientations=rng.uniform(0.0, np.pi, landmark_count),
                     elongations=rng.uniform(1.0, 1.6, landmark_count),
                     trajectory=trajectory or TrajectorySpec(), seed=seed, **kwargs)


def make_loop_fixture(seed: int = 0) -> SceneSpec:
    return make_scene(TrajectorySpec(TrajectoryKind.FIGURE_EIGHT), seed=seed)


def make_hdr_fixture(seed: int = 0, dim_interval: Tuple[float, float] = (1.5, 2.5), dim_factor: float = 0.02,
                     trajectory: Optional[TrajectorySpec] = None) -> SceneSpec:
    """Frames go nearly black over ``dim_interval`` while the events keep seeing the scene."""
    return make_scene(trajectory or TrajectorySpec(TrajectoryKind.FIGURE_EIGHT), seed=seed,
                      dim_intervals=(dim_interval,), dim_factor=dim_factor)


def view_pose(rig: RigCalibration, pose_wc: Pose, side: Side, events: bool = False) -> Pose:
    """World-to-camera pose of one of the rig's cameras for a left frame camera at ``pose_wc``."""
    pose = pose_wc.inverse()
    if side == Side.RIGHT:
        pose = rig.T_lr.compose(pose)
    if events:
        pose = rig.event_extrinsic(side).inverse().compose(pose)
    return pose


def _camera(rig: RigCalibration, side: Side, events: bool) -> PinholeCamera:
    return rig.dvs(side) if events else rig.camera(side)


def blob_centers(spec: SceneSpec, pose_wc: Pose, side: Side = Side.LEFT,
                 events: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    return project_points(_camera(spec.rig, side, events), view_pose(spec.rig, pose_wc, side, events),
                          spec.landmarks)


def visible_landmarks(spec: SceneSpec, pose_wc: Pose, side: Side = Side.LEFT, margin: float = 0.0) -> np.ndarray:
    px, depth = blob_centers(spec, pose_wc, side)
    inside = spec.rig.camera(side).contains(np.nan_to_num(px, nan=-1e9), margin)
    return inside & (depth >= FRUSTUM_NEAR) & (depth <= FRUSTUM_FAR)


def render_radiance(spec: SceneSpec, cam: PinholeCamera, pose_cw: Pose) -> np.ndarray:
    px, depth = project_points(cam, pose_cw, spec.landmarks)
    image = np.full(cam.shape, spec.background)
    precision = spec.blob_precision()
    reach = BLOB_EXTENT * spec.blob_sigma * spec.elongations
    for k in np.nonzero(depth >= FRUSTUM_NEAR)[0]:
        x, y = px[k]
        c0, c1 = max(int(np.floor(x - reach[k])), 0), min(int(np.ceil(x + reach[k])) + 1, cam.width)
        r0, r1 = max(int(np.floor(y - reach[k])), 0), min(int(np.ceil(y + reach[k])) + 1, cam.height)
        if c0 >= c1 or r0 >= r1:
            continue
        dx = np.arange(c0, c1) - x
        dy = (np.arange(r0, r1) - y)[:, None]
        a, b, c = precision[k]
        image[r0:r1, c0:c1] += spec.amplitudes[k] * np.exp(-0.5 * (a * dx ** 2 + 2 * b * dx * dy + c * dy ** 2))
    return image


@dataclass(frozen=True, eq=False)
class RenderedFrames:
    timestamps: np.ndarray
    left: np.ndarray
    right: np.ndarray
    poses: List[Pose]


def render_frames(spec: SceneSpec) -> RenderedFrames:
    """Stereo frames at the trajectory's sample times, with their camera-to-world poses."""
    rng = np.random.default_rng(spec.seed)
    timestamps = spec.trajectory.timestamps()
    poses = [spec.trajectory.pose_at(t) for t in timestamps]
    frames: Dict[Side, List[np.ndarray]] = {Side.LEFT: [], Side.RIGHT: []}
    for t, pose in zip(timestamps, poses):
        for side in (Side.LEFT, Side.RIGHT):
            image = render_radiance(spec, spec.rig.camera(side), view_pose(spec.rig, pose, side))
            if spec.dimmed(t):
                image *= spec.dim_factor
            if spec.noise.pixel_sigma > 0:
                image += rng.normal(scale=spec.noise.pixel_sigma, size=image.shape)
            frames[side].append(np.clip(image, 0.0, 1.0))
    dimmed = sum(spec.dimmed(t) for t in timestamps)
    logger.info("Rendered %d stereo frames (%d dimmed)", len(timestamps), dimmed)
    return RenderedFrames(timestamps, np.array(frames[Side.LEFT]), np.array(frames[Side.RIGHT]), poses)


def crossing_events(log_before: np.ndarray, log_after: np.ndarray, reference: np.ndarray, t_start: int,
                    t_end: int, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Events for every threshold crossing of the log intensity between two
    renders, and the updated per-pixel reference level.

    Each pixel fires once per multiple of ``threshold`` between its reference
    and the new log intensity; timestamps interpolate linearly between
    ``t_start`` and ``t_end`` (nanoseconds) at the crossed level.
    """
    counts = np.fix((log_after - reference) / threshold).astype(np.int64)
    rows, cols = np.nonzero(counts)
    if len(rows) == 0:
        return np.zeros(0, dtype=EVENT_DTYPE), reference
    per_pixel = counts[rows, cols]
    n = np.abs(per_pixel)
    owner = np.repeat(np.arange(len(rows)), n)
    step = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + 1
    sign = np.sign(per_pixel)[owner]
    level = reference[rows, cols][owner] + sign * step * threshold
    start = log_before[rows, cols][owner]
    span = log_after[rows, cols][owner] - start
    fraction = np.ones_like(level)
    np.divide(level - start, span, out=fraction, where=span != 0)
    times = t_start + np.rint((t_end - t_start) * np.clip(fraction, 0.0, 1.0)).astype(np.int64)
    events = make_events(times, cols[owner], rows[owner], sign)
    updated = reference.copy()
    updated[rows, cols] += per_pixel * threshold
    return events[np.lexsort((events['x'], events['y'], events['t']))], updated


def _side_events(spec: SceneSpec, side: Side, sample_times: np.ndarray) -> np.ndarray:
    cam = spec.rig.dvs(side)
    threshold = spec.noise.contrast_threshold

    def log_render(t: float) -> np.ndarray:
        return np.log(render_radiance(spec, cam, view_pose(spec.rig, spec.trajectory.pose_at(t), side, True)))

    previous = log_render(sample_times[0])
    reference = previous.copy()
    chunks = []
    for t0, t1 in zip(sample_times[:-1], sample_times[1:]):
        current = log_render(t1)
        events, reference = crossing_events(previous, current, reference, seconds_to_ns(t0), seconds_to_ns(t1),
                                            threshold)
        chunks.append(events)
        previous = current
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)


def _jitter(events: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    offsets = np.rint(rng.normal(scale=sigma * 1e9, size=len(events))).astype(np.int64)
    shifted = events['t'].astype(np.int64) + offsets
    events = events.copy()
    events['t'] = np.maximum(shifted, 0)
    return events[np.argsort(events['t'], kind='stable')]


def generate_events(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Left and right event streams over the whole trajectory, time-sorted."""
    frame_times = spec.trajectory.timestamps()
    samples = (len(frame_times) - 1) * spec.event_substeps + 1
    sample_times = np.linspace(frame_times[0], frame_times[-1], samples)
    rng = np.random.default_rng(spec.seed + 1)
    streams = []
    for side in (Side.LEFT, Side.RIGHT):
        events = _side_events(spec, side, sample_times)
        if spec.noise.event_jitter > 0:
            events = _jitter(events, spec.noise.event_jitter, rng)
        streams.append(events)
    logger.info("Generated %d left and %d right events", len(streams[0]), len(streams[1]))
    return streams[0], streams[1]


@dataclass(frozen=True, eq=False)
class SimulatedSequence:
    rig: RigCalibration
    timestamps: np.ndarray
    frames_left: np.ndarray
    frames_right: np.ndarray
    events_left: np.ndarray
    events_right: np.ndarray
    ground_truth: List[TrajectoryRecord]


def simulate(spec: SceneSpec) -> SimulatedSequence:
    frames = render_frames(spec)
    events_left, events_right = generate_events(spec)
    ground_truth = [TrajectoryRecord(float(t), pose) for t, pose in zip(frames.timestamps, frames.poses)]
    return SimulatedSequence(spec.rig, frames.timestamps, frames.left, frames.right, events_left, events_right,
                             ground_truth)


def write_frame_times(timestamps: Sequence[float], path: Union[str, Path]) -> None:
    with Path(path).open('w', encoding='utf-8') as f:
        for t in timestamps:
            f.write(f'{t:.9f}\n')


def write_sequence(sequence: SimulatedSequence, directory: Union[str, Path]) -> Path:
    """Write the native dataset layout read back by the simulator sequence adapter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_calibration(sequence.rig, directory / CALIBRATION_FILE)
    np.save(directory / FRAMES_LEFT_FILE, sequence.frames_left)
    np.save(directory / FRAMES_RIGHT_FILE, sequence.frames_right)
    write_frame_times(sequence.timestamps, directory / FRAME_TIMES_FILE)
    write_events_binary(sequence.events_left, directory / EVENTS_LEFT_FILE)
    write_events_binary(sequence.events_right, directory / EVENTS_RIGHT_FILE)
    write_tum(sequence.ground_truth, directory / GROUND_TRUTH_FILE)
    logger.info("Wrote %d frames to %s", len(sequence.timestamps), directory)
    return directory

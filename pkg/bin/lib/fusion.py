"""Blending of each stereo frame pair with the event tensors of the interval before it."""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from lib.errors import ConfigError, DataError, DimensionMismatch, InsufficientMatches, ParseError
from lib.events import E3CT, StereoE3CT
from lib.geometry import PinholeCamera, Pose, RigCalibration, Side

logger = logging.getLogger(__name__)

MIN_ALIGNMENT_MATCHES = 10
MATCH_FILE_HEADER = 'fx,fy,ex,ey'


class FusionMode(Enum):
    APS_BIASED = 'aps'
    DVS_BIASED = 'dvs'


@dataclass(frozen=True)
class FusionConfig:
    beta_cap: float = 0.3
    mode_feature_floor: int = 50
    assumed_scene_depth: float = 3.0
    bilinear_splat: bool = False
    images_only: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta_cap <= 1.0:
            raise ConfigError(f"fusion.beta_cap must lie in [0, 1] (got {self.beta_cap})")
        if self.mode_feature_floor < 0:
            raise ConfigError(f"fusion.mode_feature_floor must be non-negative (got {self.mode_feature_floor})")
        if not self.assumed_scene_depth > 0:
            raise ConfigError(f"fusion.assumed_scene_depth must be positive (got {self.assumed_scene_depth})")


@dataclass(frozen=True)
class FrameStatistics:
    mean: float
    max: float


@dataclass(frozen=True, eq=False)
class FusionFrame:
    image_left: np.ndarray
    image_right: np.ndarray
    timestamp: float
    beta: float
    mode: FusionMode
    # collapsed event images on the frame grid, when events were blended in
    events_left: Optional[np.ndarray] = None
    events_right: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AlignmentEstimate:
    offset: np.ndarray
    rms: float
    count: int


def frame_statistics(*images: np.ndarray) -> FrameStatistics:
    values = np.concatenate([np.asarray(image, dtype=float).ravel() for image in images])
    return FrameStatistics(float(values.mean()), float(values.max()))


def collapse_tensor(channels: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(channels, dtype=float).mean(axis=0), 0.0, 1.0)


def map_event_pixels(dvs: PinholeCamera, cam: PinholeCamera, T_cd: Pose,  # pylint: disable=invalid-name
                     align: np.ndarray, px: np.ndarray, depth) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverse-forward projection of event pixels into the frame camera.

    Each pixel is lifted to ``depth`` along its event-camera ray, moved into the frame
    camera and projected with its new depth, then shifted by ``align``. Returns the
    target pixels and a mask of points that land in front of the frame camera.
    """
    lifted = dvs.unproject(np.asarray(px, dtype=float), depth)
    in_frame = T_cd.transform(lifted.reshape(-1, 3))
    ahead = in_frame[:, 2] > 0
    target = np.full((in_frame.shape[0], 2), np.nan)
    target[ahead] = cam.project_camera(in_frame[ahead]) + np.asarray(align, dtype=float)
    return target, ahead


def _splat_nearest(out: np.ndarray, target: np.ndarray, values: np.ndarray) -> None:
    cols = np.floor(target[:, 0] + 0.5).astype(np.intp)
    rows = np.floor(target[:, 1] + 0.5).astype(np.intp)
    height, width = out.shape[1:]
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    for channel in range(out.shape[0]):
        np.add.at(out[channel], (rows[inside], cols[inside]), values[channel, inside])


def _splat_bilinear(out: np.ndarray, target: np.ndarray, values: np.ndarray) -> None:
    x0 = np.floor(target[:, 0]).astype(np.intp)
    y0 = np.floor(target[:, 1]).astype(np.intp)
    fx = target[:, 0] - x0
    fy = target[:, 1] - y0
    height, width = out.shape[1:]
    for dx, dy, weight in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cols, rows = x0 + dx, y0 + dy
        inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
        for channel in range(out.shape[0]):
            np.add.at(out[channel], (rows[inside], cols[inside]), values[channel, inside] * weight[inside])


def warp_e3ct(tensor: E3CT, rig: RigCalibration, side: Side, depth: float, bilinear: bool = False) -> np.ndarray:
    """Event tensor resampled onto the frame camera's pixel grid (3 x H x W)."""
    if not depth > 0:
        raise ValueError(f"Scene depth must be positive (got {depth})")
    cam = rig.camera(side)
    out = np.zeros((tensor.channels.shape[0], cam.height, cam.width))
    rows, cols = np.nonzero(tensor.channels.any(axis=0))
    if len(rows) == 0:
        return out
    px = np.column_stack([cols, rows]).astype(float)
    target, ahead = map_event_pixels(rig.dvs(side), cam, rig.event_extrinsic(side), rig.alignment(side), px, depth)
    values = tensor.channels[:, rows, cols]
    splat = _splat_bilinear if bilinear else _splat_nearest
    splat(out, target[ahead], values[:, ahead])
    return out


def calibrate_alignment(frame_px: np.ndarray, warped_px: np.ndarray) -> AlignmentEstimate:
    """Least-squares constant offset taking warped event pixels onto their frame matches."""
    frame_px = np.asarray(frame_px, dtype=float).reshape(-1, 2)
    warped_px = np.asarray(warped_px, dtype=float).reshape(-1, 2)
    if len(frame_px) != len(warped_px):
        raise DimensionMismatch(f"{len(frame_px)} frame pixels but {len(warped_px)} event pixels")
    if len(frame_px) < MIN_ALIGNMENT_MATCHES:
        raise InsufficientMatches(f"Need at least {MIN_ALIGNMENT_MATCHES} matches to estimate alignment, "
                                  f"got {len(frame_px)}")
    differences = frame_px - warped_px
    offset = differences.mean(axis=0)
    rms = float(np.sqrt(np.mean(np.sum((differences - offset) ** 2, axis=1))))
    logger.info("Estimated alignment offset (%.3f, %.3f) from %d matches, RMS residual %.3f px",
                offset[0], offset[1], len(frame_px), rms)
    return AlignmentEstimate(offset, rms, len(frame_px))


def read_match_file(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Match file {path} not found")
    rows = []
    with path.open(encoding='utf-8') as f:
        header = f.readline().strip()
        if header != MATCH_FILE_HEADER:
            raise ParseError(path, 1, f"expected header '{MATCH_FILE_HEADER}'")
        for line_number, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                values = [float(v) for v in line.split(',')]
            except ValueError as e:
                raise ParseError(path, line_number, str(e)) from e
            if len(values) != 4:
                raise ParseError(path, line_number, f"expected 4 fields, got {len(values)}")
            rows.append(values)
    matches = np.array(rows, dtype=float).reshape(-1, 4)
    return matches[:, :2], matches[:, 2:]


def select_beta(stats: FrameStatistics, feature_count: int, cfg: FusionConfig) -> Tuple[float, FusionMode]:
    ratio = stats.mean / stats.max if stats.max > 0 else 0.0
    if feature_count < cfg.mode_feature_floor:
        mode = FusionMode.DVS_BIASED
        beta = max(ratio, 1.0 - ratio)
    else:
        mode = FusionMode.APS_BIASED
        beta = min(ratio, 1.0 - ratio)
    return min(beta, cfg.beta_cap), mode


def fuse(frame: np.ndarray, events: np.ndarray, beta: float) -> np.ndarray:
    frame = np.asarray(frame, dtype=float)
    events = np.asarray(events, dtype=float)
    if frame.shape != events.shape:
        raise DimensionMismatch(f"Frame is {frame.shape} but event image is {events.shape}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"Blend weight must lie in [0, 1] (got {beta})")
    if beta == 0.0:
        return frame.copy()
    return np.clip((1.0 - beta) * frame + beta * events, 0.0, 1.0)


class FusionStage:
    """Blends a stereo frame pair with the matching event tensors."""

    def __init__(self, rig: RigCalibration, cfg: FusionConfig):
        self.rig = rig
        self.cfg = cfg
        self.mode_counts = {mode: 0 for mode in FusionMode}
        self._last_mode: Optional[FusionMode] = None

    def event_image(self, tensor: E3CT, side: Side, depth: float) -> np.ndarray:
        return collapse_tensor(warp_e3ct(tensor, self.rig, side, depth, self.cfg.bilinear_splat))

    def process(self, frame_left: np.ndarray, frame_right: np.ndarray, tensors: Optional[StereoE3CT],
                timestamp: float, feature_count: int, depth: Optional[float] = None) -> FusionFrame:
        beta, mode = select_beta(frame_statistics(frame_left, frame_right), feature_count, self.cfg)
        if self.cfg.images_only or tensors is None:
            beta = 0.0
        self.mode_counts[mode] += 1
        if mode != self._last_mode:
            logger.info("Fusion mode %s at t=%.6f (beta %.3f, %d frame features)",
                        mode.value, timestamp, beta, feature_count)
            self._last_mode = mode
        if beta == 0.0:
            return FusionFrame(np.asarray(frame_left, dtype=float).copy(),
                               np.asarray(frame_right, dtype=float).copy(), timestamp, beta, mode)
        assert tensors is not None
        depth = depth if depth is not None else self.cfg.assumed_scene_depth
        events_left = self.event_image(tensors.left, Side.LEFT, depth)
        events_right = self.event_image(tensors.right, Side.RIGHT, depth)
        return FusionFrame(fuse(frame_left, events_left, beta), fuse(frame_right, events_right, beta), timestamp, beta,
                           mode, events_left, events_right)

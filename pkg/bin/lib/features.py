"""
Keypoint detection, description and the two matching strategies.

The built-in detector scores pixels with the smaller eigenvalue of the local
structure tensor and describes each keypoint by a mean-subtracted, unit-norm
11x11 intensity patch sampled around its sub-pixel position. Descriptors are
compared with the L2 distance; a backend's ``distance_scale`` converts the
configured matching distance into descriptor units.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from lib.errors import ConfigError, DetectorFailure, NoFeatures

logger = logging.getLogger(__name__)

PATCH_SIZE = 11
# pixels from the image edge inside which a full patch can be described
BORDER = PATCH_SIZE // 2 + 1
SHI_TOMASI = 'shi-tomasi'
TORCHSCRIPT = 'torchscript'


@dataclass(frozen=True, eq=False)
class FeatureSet:
    px: np.ndarray
    descriptors: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'px', np.asarray(self.px, dtype=float).reshape(-1, 2))
        object.__setattr__(self, 'scores', np.asarray(self.scores, dtype=float).reshape(-1))
        descriptors = np.asarray(self.descriptors, dtype=float)
        if descriptors.ndim != 2:
            descriptors = descriptors.reshape(len(self.px), -1)
        object.__setattr__(self, 'descriptors', descriptors)

    @staticmethod
    def empty(dimension: int = PATCH_SIZE * PATCH_SIZE) -> 'FeatureSet':
        return FeatureSet(np.zeros((0, 2)), np.zeros((0, dimension)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.px)

    def subset(self, indices) -> 'FeatureSet':
        return FeatureSet(self.px[indices], self.descriptors[indices], self.scores[indices])


@dataclass(frozen=True)
class MatchingParams:
    cell_size: float = 15.0
    neighborhood: float = 2.0
    max_distance: float = 25.0
    frustum_near: float = 0.1
    frustum_far: float = 30.0
    # rectified stereo: allowed row difference, and the least disparity, in pixels
    epipolar_band: Optional[float] = None

    def __post_init__(self):
        for name in ('cell_size', 'neighborhood', 'max_distance', 'frustum_near', 'frustum_far'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"matching.{name} must be positive (got {getattr(self, name)})")
        if self.epipolar_band is not None and self.epipolar_band < 0:
            raise ConfigError(f"matching.epipolar_band must be non-negative (got {self.epipolar_band})")
        if not self.frustum_near < self.frustum_far:
            raise ConfigError(f"matching.frustum_near ({self.frustum_near}) must be below "
                              f"matching.frustum_far ({self.frustum_far})")

    @property
    def search_radius(self) -> float:
        return self.neighborhood * self.cell_size

    def descriptor_threshold(self, distance_scale: float) -> float:
        return self.max_distance * distance_scale


class Detector(Protocol):
    distance_scale: float

    def detect(self, image: np.ndarray) -> FeatureSet:
        ...


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = SHI_TOMASI
    max_features: int = 300
    min_score: float = 1e-4
    nms_radius: int = 4
    smoothing_sigma: float = 1.0
    distance_scale: float = 0.02
    model_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (SHI_TOMASI, TORCHSCRIPT):
            raise ConfigError(f"detector.kind must be '{SHI_TOMASI}' or '{TORCHSCRIPT}' (got '{self.kind}')")
        if self.kind == TORCHSCRIPT and not self.model_path:
            raise ConfigError("detector.model_path is required for the torchscript detector")
        if self.max_features <= 0 or self.nms_radius < 1 or not self.distance_scale > 0:
            raise ConfigError("detector.max_features, detector.nms_radius and detector.distance_scale "
                              "must be positive")


def _unit_rows(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=1)
    keep = norms > 1e-12
    return matrix[keep] / norms[keep, None], keep


def describe(image: np.ndarray, px: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Patch descriptors at sub-pixel positions; returns descriptors and a mask of describable points."""
    half = PATCH_SIZE // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    grid_y, grid_x = np.meshgrid(offsets, offsets, indexing='ij')
    rows = px[:, 1, None] + grid_y.ravel()[None, :]
    cols = px[:, 0, None] + grid_x.ravel()[None, :]
    samples = ndimage.map_coordinates(image, [rows.ravel(), cols.ravel()], order=1, mode='nearest')
    patches = samples.reshape(len(px), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    descriptors, keep = _unit_rows(patches)
    return descriptors, keep


_QUADRATIC_DESIGN = np.array([[1.0, x, y, x * x, x * y, y * y] for y in (-1, 0, 1) for x in (-1, 0, 1)])
_QUADRATIC_PINV = np.linalg.pinv(_QUADRATIC_DESIGN)


def _quadratic_peak(patch: np.ndarray) -> Optional[np.ndarray]:
    _, b, c, d, e, f = _QUADRATIC_PINV @ patch.ravel()
    hessian = np.array([[2 * d, e], [e, 2 * f]])
    if not (hessian[0, 0] < 0 and np.linalg.det(hessian) > 0):
        return None
    offset = -np.linalg.solve(hessian, [b, c])
    return offset if np.all(np.abs(offset) <= 1.0) else None


def _parabola_offset(minus: float, centre: float, plus: float) -> float:
    denom = minus - 2 * centre + plus
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (minus - plus) / denom, -0.5, 0.5))


def refine_subpixel(image: np.ndarray, score: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Fit a quadratic to the log-intensity around each peak; fall back to a parabola through the score."""
    refined = np.column_stack([cols, rows]).astype(float)
    for i, (r, c) in enumerate(zip(rows, cols)):
        patch = image[r - 1:r + 2, c - 1:c + 2]
        offset = _quadratic_peak(np.log(patch)) if np.all(patch > 0) else None
        if offset is None:
            offset = np.array([_parabola_offset(score[r, c - 1], score[r, c], score[r, c + 1]),
                               _parabola_offset(score[r - 1, c], score[r, c], score[r + 1, c])])
        refined[i] += offset
    return refined


class ShiTomasiDetector:
    def __init__(self, max_features: int = 300, min_score: float = 1e-4, nms_radius: int = 4,
                 smoothing_sigma: float = 1.0, distance_scale: float = 0.02):
        self.max_features = max_features
        self.min_score = min_score
        self.nms_radius = nms_radius
        self.smoothing_sigma = smoothing_sigma
        self.distance_scale = distance_scale
        self.border = BORDER

    def corner_score(self, image: np.ndarray) -> np.ndarray:
        gx = ndimage.sobel(image, axis=1, mode='reflect') / 8.0
        gy = ndimage.sobel(image, axis=0, mode='reflect') / 8.0
        sxx = ndimage.gaussian_filter(gx * gx, self.smoothing_sigma)
        syy = ndimage.gaussian_filter(gy * gy, self.smoothing_sigma)
        sxy = ndimage.gaussian_filter(gx * gy, self.smoothing_sigma)
        return 0.5 * (sxx + syy) - np.sqrt(0.25 * (sxx - syy) ** 2 + sxy ** 2)

    def _suppress(self, score: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        peaks = score == ndimage.maximum_filter(score, size=2 * self.nms_radius + 1, mode='nearest')
        peaks &= score > self.min_score
        b = self.border
        peaks[:b, :] = False
        peaks[-b:, :] = False
        peaks[:, :b] = False
        peaks[:, -b:] = False
        rows, cols = np.nonzero(peaks)
        order = np.lexsort((cols, rows, -score[rows, cols]))
        kept_rows, kept_cols = [], []
        radius_sq = self.nms_radius ** 2
        for r, c in zip(rows[order], cols[order]):
            if kept_rows:
                d2 = (np.asarray(kept_rows) - r) ** 2 + (np.asarray(kept_cols) - c) ** 2
                if np.any(d2 <= radius_sq):
                    continue
            kept_rows.append(r)
            kept_cols.append(c)
            if len(kept_rows) == self.max_features:
                break
        return np.asarray(kept_rows, dtype=np.intp), np.asarray(kept_cols, dtype=np.intp)

    def detect(self, image: np.ndarray) -> FeatureSet:
        image = np.asarray(image, dtype=float)
        if image.shape[0] <= 2 * self.border or image.shape[1] <= 2 * self.border:
            return FeatureSet.empty()
        score = self.corner_score(image)
        rows, cols = self._suppress(score)
        if len(rows) == 0:
            return FeatureSet.empty()
        px = refine_subpixel(image, score, rows, cols)
        descriptors, keep = describe(image, px)
        features = FeatureSet(px[keep], descriptors, score[rows, cols][keep])
        logger.debug("Detected %d features", len(features))
        return features


class TorchScriptDetector:
    """
    Learned keypoint backend loaded from a TorchScript file.

    The model takes a 1x1xHxW float image in [0, 1] and returns a tuple of
    keypoints (N x 2, pixel x then y), scores (N) and descriptors (N x D).
    """

    def __init__(self, model_path: str, max_features: int = 300, distance_scale: float = 1.0):
        path = Path(model_path)
        if not path.is_file():
            raise DetectorFailure(f"Detector model {path} not found")
        try:
            import torch  # pylint: disable=import-outside-toplevel
        except ImportError as e:
            raise DetectorFailure("The torchscript detector needs the 'torch' package") from e
        try:
            self._model = torch.jit.load(str(path), map_location='cpu')
        except Exception as e:  # pylint: disable=broad-except
            raise DetectorFailure(f"Unable to load detector model {path}: {e}") from e
        self._model.eval()
        self._torch = torch
        self.max_features = max_features
        self.distance_scale = distance_scale

    def detect(self, image: np.ndarray) -> FeatureSet:
        torch = self._torch
        with torch.no_grad():
            try:
                keypoints, scores, descriptors = self._model(
                    torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None])
            except Exception as e:  # pylint: disable=broad-except
                raise DetectorFailure(f"Detector inference failed: {e}") from e
        px = keypoints.cpu().numpy().astype(float).reshape(-1, 2)
        scores = scores.cpu().numpy().astype(float).reshape(-1)
        descriptors, keep = _unit_rows(descriptors.cpu().numpy().astype(float).reshape(len(px), -1))
        px, scores = px[keep], scores[keep]
        inside = (px[:, 0] >= 0) & (px[:, 0] <= image.shape[1] - 1) & (px[:, 1] >= 0) & (px[:, 1] <= image.shape[0] - 1)
        order = np.argsort(-scores[inside], kind='stable')[:self.max_features]
        return FeatureSet(px[inside][order], descriptors[inside][order], scores[inside][order])


def make_detector(cfg: DetectorConfig) -> Detector:
    if cfg.kind == TORCHSCRIPT:
        assert cfg.model_path is not None
        return TorchScriptDetector(cfg.model_path, cfg.max_features, cfg.distance_scale)
    return ShiTomasiDetector(cfg.max_features, cfg.min_score, cfg.nms_radius, cfg.smoothing_sigma,
                             cfg.distance_scale)


def detect(image: np.ndarray, detector: Detector) -> FeatureSet:
    return detector.detect(image)


def _cell(px: np.ndarray, cell_size: float) -> np.ndarray:
    return np.floor(px / cell_size).astype(np.int64)


def mutual_best(distances: np.ndarray) -> np.ndarray:
    if distances.size == 0:
        return np.zeros((0, 2), dtype=np.intp)
    best_right = np.argmin(distances, axis=1)
    best_left = np.argmin(distances, axis=0)
    left = np.arange(distances.shape[0])
    ok = np.isfinite(distances[left, best_right]) & (best_left[best_right] == left)
    return np.column_stack([left[ok], best_right[ok]])


def match_stereo(left: FeatureSet, right: FeatureSet, params: MatchingParams,
                 distance_scale: float = 1.0) -> np.ndarray:
    """
    Mutually best descriptor matches between nearby grid cells; rows of (left index, right index).

    With ``params.epipolar_band`` set, a right feature must also lie on the left feature's row
    (within the band) and not to its right by more than the band.
    """
    if len(left) == 0 or len(right) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    distances = cdist(left.descriptors, right.descriptors)
    reach = math.ceil(params.neighborhood)
    cell_l, cell_r = _cell(left.px, params.cell_size), _cell(right.px, params.cell_size)
    near = np.all(np.abs(cell_l[:, None, :] - cell_r[None, :, :]) <= reach, axis=2)
    if params.epipolar_band is not None:
        rows = np.abs(left.px[:, None, 1] - right.px[None, :, 1]) <= params.epipolar_band
        near &= rows & (left.px[:, None, 0] - right.px[None, :, 0] >= -params.epipolar_band)
    distances[~near | (distances > params.descriptor_threshold(distance_scale))] = np.inf
    return mutual_best(distances)


def match_temporal(current: FeatureSet, predicted_px: np.ndarray, map_descriptors: np.ndarray,
                   params: MatchingParams, previous_px: Optional[np.ndarray] = None,
                   predicted_depth: Optional[np.ndarray] = None, distance_scale: float = 1.0,
                   image_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Match projected map points to current features; rows of (map point index, feature index).

    Each point searches a disc of radius ``neighborhood * cell_size`` around its
    predicted pixel. With a previous pixel the disc is cut to the half lying ahead
    along the predicted image motion. Points outside the frustum are not searched.
    """
    predicted_px = np.asarray(predicted_px, dtype=float).reshape(-1, 2)
    if len(current) == 0 or len(predicted_px) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    visible = np.all(np.isfinite(predicted_px), axis=1)
    if predicted_depth is not None:
        depth = np.asarray(predicted_depth, dtype=float)
        visible &= (depth >= params.frustum_near) & (depth <= params.frustum_far)
    if image_shape is not None:
        height, width = image_shape
        visible &= (predicted_px[:, 0] >= 0) & (predicted_px[:, 0] <= width - 1)
        visible &= (predicted_px[:, 1] >= 0) & (predicted_px[:, 1] <= height - 1)
    safe_px = np.where(visible[:, None], predicted_px, 0.0)

    offsets = current.px[None, :, :] - safe_px[:, None, :]
    allowed = np.sum(offsets ** 2, axis=2) <= params.search_radius ** 2
    if previous_px is not None:
        previous_px = np.asarray(previous_px, dtype=float).reshape(-1, 2)
        motion = safe_px - previous_px
        length = np.linalg.norm(motion, axis=1)
        moving = length > 0.5
        direction = np.where(moving[:, None], motion / np.maximum(length, 1e-12)[:, None], 0.0)
        ahead = np.einsum('mnk,mk->mn', current.px[None, :, :] - previous_px[:, None, :], direction) >= 0
        allowed &= ahead | ~moving[:, None]
    allowed &= visible[:, None]

    distances = cdist(np.asarray(map_descriptors, dtype=float).reshape(len(predicted_px), -1), current.descriptors)
    distances[~allowed | (distances > params.descriptor_threshold(distance_scale))] = np.inf

    best_feature = np.argmin(distances, axis=1)
    points = np.arange(len(predicted_px))
    best = distances[points, best_feature]
    candidates = np.isfinite(best)
    # a feature claimed by several points goes to the closest descriptor, then the lower point index
    order = np.lexsort((points[candidates], best[candidates]))
    claimed = set()
    matches = []
    for point in points[candidates][order]:
        feature = int(best_feature[point])
        if feature in claimed:
            continue
        claimed.add(feature)
        matches.append((int(point), feature))
    matches.sort()
    return np.array(matches, dtype=np.intp).reshape(-1, 2)


def compute_embedding(features: FeatureSet) -> np.ndarray:
    """Unit-norm mean descriptor identifying a keyframe for place recognition."""
    if len(features) == 0:
        raise NoFeatures("Cannot embed a keyframe without features")
    mean = features.descriptors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        return np.zeros_like(mean)
    return mean / norm

"""
Recorded stereo hybrid sequences on disk, one adapter per directory layout.

Every layout provides a calibration file in the native format, left and right
frames with their timestamps, left and right event files (binary or CSV) and
optionally a ground-truth trajectory.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Type, Union

import numpy as np
from matplotlib import image as mpimg

from lib.calibration import load_calibration
from lib.errors import ConfigError, DataError, ParseError
from lib.events import ArrayEventSource, read_events, seconds_to_ns
from lib.geometry import RigCalibration
from lib.trajectory import TrajectoryRecord, read_tum

logger = logging.getLogger(__name__)

CALIBRATION_FILE = 'calibration.yaml'
FRAMES_LEFT_FILE = 'frames_left.npy'
FRAMES_RIGHT_FILE = 'frames_right.npy'
FRAME_TIMES_FILE = 'frame_times.txt'
EVENTS_LEFT_FILE = 'events_left.bin'
EVENTS_RIGHT_FILE = 'events_right.bin'
GROUND_TRUTH_FILE = 'groundtruth.txt'

EVENT_SUFFIXES = ('.bin', '.csv')

PathLike = Union[str, Path]


def read_timestamps(path: Path, scale: float = 1.0) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"Timestamp file {path} not found")
    stamps = []
    with path.open(encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                stamps.append(float(line.split()[0]) * scale)
            except ValueError as e:
                raise ParseError(path, number, f"not a timestamp: {e}") from e
    return np.asarray(stamps)


def read_image(path: Path) -> np.ndarray:
    """Grey-level image scaled to [0, 1]."""
    data = np.asarray(mpimg.imread(path))
    if data.ndim == 3:
        data = data[..., :3].mean(axis=2)
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(float) / np.iinfo(data.dtype).max
    return data.astype(float)


class SequenceAdapter:
    """Base of the dataset layouts; subclasses name their files and load frames."""
    name = ''
    events_left_stem = 'events_left'
    events_right_stem = 'events_right'
    ground_truth_file = GROUND_TRUTH_FILE
    time_scale = 1.0

    def __init__(self, directory: PathLike, calibration: Optional[PathLike] = None):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DataError(f"Dataset directory {self.directory} not found")
        self.rig: RigCalibration = load_calibration(calibration or self.directory / CALIBRATION_FILE)
        self.frame_times = self._frame_times()
        if len(self.frame_times) < 2:
            raise DataError(f"{self.directory} holds {len(self.frame_times)} frames, need at least 2")
        logger.info("Opened %s sequence %s: %d frames over %.3f s", self.name, self.directory,
                    len(self.frame_times), self.frame_times[-1] - self.frame_times[0])

    def __len__(self) -> int:
        return len(self.frame_times)

    def _frame_times(self) -> np.ndarray:
        raise NotImplementedError()

    def frames(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError()

    def _event_path(self, stem: str) -> Path:
        for suffix in EVENT_SUFFIXES:
            path = self.directory / (stem + suffix)
            if path.is_file():
                return path
        raise DataError(f"No event file {stem}{{{','.join(EVENT_SUFFIXES)}}} in {self.directory}")

    def events(self) -> Tuple[np.ndarray, np.ndarray]:
        return read_events(self._event_path(self.events_left_stem)), read_events(
            self._event_path(self.events_right_stem))

    def event_streams(self) -> Tuple[ArrayEventSource, ArrayEventSource]:
        left, right = self.events()
        end = seconds_to_ns(float(self.frame_times[-1])) + 1
        return ArrayEventSource(left, end), ArrayEventSource(right, end)

    def ground_truth(self) -> Optional[List[TrajectoryRecord]]:
        path = self.directory / self.ground_truth_file
        if not path.is_file():
            return None
        records = read_tum(path)
        if self.time_scale != 1.0:
            records = [TrajectoryRecord(r.timestamp * self.time_scale, r.pose) for r in records]
        return records


class SimulatorSequence(SequenceAdapter):
    """Layout written by the simulator: frame stacks as ``.npy`` and binary events."""
    name = 'simulator'

    def __init__(self, directory: PathLike, calibration: Optional[PathLike] = None):
        super().__init__(directory, calibration)
        self._left = self._stack(FRAMES_LEFT_FILE)
        self._right = self._stack(FRAMES_RIGHT_FILE)

    def _stack(self, name: str) -> np.ndarray:
        path = self.directory / name
        if not path.is_file():
            raise DataError(f"Frame stack {path} not found")
        stack = np.load(path, mmap_mode='r')
        if stack.shape[0] != len(self.frame_times):
            raise DataError(f"{path} holds {stack.shape[0]} frames but there are {len(self.frame_times)} timestamps")
        return stack

    def _frame_times(self) -> np.ndarray:
        return read_timestamps(self.directory / FRAME_TIMES_FILE)

    def frames(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self._left[k], dtype=float), np.array(self._right[k], dtype=float)


class ImageDirectorySequence(SequenceAdapter):
    """Frames as one image file per timestamp in a directory per camera."""
    left_dir = ''
    right_dir = ''
    timestamps_file = ''

    def __init__(self, directory: PathLike, calibration: Optional[PathLike] = None):
        super().__init__(directory, calibration)
        self._left = self._images(self.left_dir)
        self._right = self._images(self.right_dir)

    def _images(self, name: str) -> List[Path]:
        folder = self.directory / name
        images = sorted(folder.glob('*.png')) if folder.is_dir() else []
        if len(images) != len(self.frame_times):
            raise DataError(f"{folder} holds {len(images)} images but there are {len(self.frame_times)} timestamps")
        return images

    def _frame_times(self) -> np.ndarray:
        return read_timestamps(self.directory / self.timestamps_file, self.time_scale)

    def frames(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        return read_image(self._left[k]), read_image(self._right[k])


class TumVieSequence(ImageDirectorySequence):
    """Microsecond timestamps, images under ``left_images``/``right_images``, motion capture poses."""
    name = 'tum-vie'
    left_dir = 'left_images'
    right_dir = 'right_images'
    timestamps_file = 'image_timestamps_left.txt'
    ground_truth_file = 'mocap-6dof.txt'
    time_scale = 1e-6


class VectorSequence(ImageDirectorySequence):
    name = 'vector'
    left_dir = 'left_camera'
    right_dir = 'right_camera'
    timestamps_file = 'left_camera_timestamps.txt'
    events_left_stem = 'left_event'
    events_right_stem = 'right_event'
    ground_truth_file = 'gt.txt'


ADAPTER_TYPES: Dict[str, Type[SequenceAdapter]] = {
    'simulator': SimulatorSequence,
    'tum-vie': TumVieSequence,
    'vector': VectorSequence,
}


def open_sequence(kind: str, directory: PathLike, calibration: Optional[PathLike] = None) -> SequenceAdapter:
    if kind not in ADAPTER_TYPES:
        raise ConfigError(f"Unknown dataset adapter '{kind}' (choose from {', '.join(sorted(ADAPTER_TYPES))})")
    return ADAPTER_TYPES[kind](directory, calibration)

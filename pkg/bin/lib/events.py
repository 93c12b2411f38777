"""
Event streams, temporal windows and the three-channel event tensor.

Events are kept as numpy structured arrays of ``EVENT_DTYPE`` (timestamps in
nanoseconds). A tensor is built per window from the window-relative event time:
a Gaussian-shaped decay weight, then a triangular vote into three temporal bins
centred in the window. Polarity is ignored throughout.
"""
import logging
from concurrent import futures
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from lib.errors import ConfigError, DataError, NonMonotonicTimestamps, ParseError, StreamExhausted

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([('t', '<u8'), ('x', '<u2'), ('y', '<u2'), ('p', 'i1')])
CSV_HEADER = 't,x,y,p'
NUM_CHANNELS = 3
MAX_MEDIAN_PASSES = 100
NS_PER_SECOND = 1_000_000_000


def seconds_to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_SECOND))


def make_events(t_ns, x, y, p=None) -> np.ndarray:
    t_ns = np.asarray(t_ns)
    events = np.zeros(t_ns.shape[0], dtype=EVENT_DTYPE)
    events['t'] = t_ns
    events['x'] = x
    events['y'] = y
    events['p'] = 1 if p is None else p
    return events


def read_events_binary(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    if size % EVENT_DTYPE.itemsize:
        raise DataError(f"{path} is {size} bytes, not a whole number of {EVENT_DTYPE.itemsize}-byte events")
    return np.fromfile(path, dtype=EVENT_DTYPE)


def write_events_binary(events: np.ndarray, path: Union[str, Path]) -> None:
    np.ascontiguousarray(events, dtype=EVENT_DTYPE).tofile(Path(path))


def read_events_csv(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    with path.open(encoding='utf-8') as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ParseError(path, 1, f"expected header '{CSV_HEADER}', got '{header}'")
        rows = []
        for line_number, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(',')
            if len(fields) != 4:
                raise ParseError(path, line_number, f"expected 4 fields, got {len(fields)}")
            try:
                rows.append(tuple(int(v) for v in fields))
            except ValueError as e:
                raise ParseError(path, line_number, str(e)) from e
    return np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, dtype=EVENT_DTYPE)


def write_events_csv(events: np.ndarray, path: Union[str, Path]) -> None:
    with Path(path).open('w', encoding='utf-8') as f:
        f.write(CSV_HEADER + '\n')
        for event in events:
            f.write(f"{int(event['t'])},{int(event['x'])},{int(event['y'])},{int(event['p'])}\n")


def read_events(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    return read_events_csv(path) if path.suffix == '.csv' else read_events_binary(path)


@dataclass(frozen=True)
class SyncSchedule:
    fusion_times: np.ndarray
    window_widths: np.ndarray

    def __len__(self) -> int:
        return len(self.fusion_times)

    def window(self, k: int) -> Tuple[float, float]:
        """Bounds of the window ending at fusion time ``k`` (k >= 1)."""
        return float(self.fusion_times[k - 1]), float(self.fusion_times[k])


def compute_fusion_timestamps(frame_stamps: Sequence[float], exposure: float) -> SyncSchedule:
    stamps = np.asarray(frame_stamps, dtype=float)
    if exposure < 0:
        raise ValueError(f"Exposure time must be non-negative (got {exposure})")
    widths = np.diff(stamps)
    if np.any(widths <= 0):
        bad = int(np.argmax(widths <= 0)) + 1
        raise NonMonotonicTimestamps(f"Frame timestamp {stamps[bad]} at index {bad} does not increase")
    fusion = stamps + exposure / 2
    return SyncSchedule(fusion, np.diff(fusion))


@dataclass(frozen=True)
class EventVolume:
    window_start: int
    window_end: int
    events: np.ndarray

    def __len__(self) -> int:
        return len(self.events)

    @property
    def width_seconds(self) -> float:
        return (self.window_end - self.window_start) / NS_PER_SECOND

    def relative_times(self) -> np.ndarray:
        return (self.events['t'].astype(np.int64) - self.window_start) / NS_PER_SECOND


class EventSource(Protocol):
    def slice(self, start_ns: int, end_ns: int) -> np.ndarray:
        ...

    def slice_count(self, end_ns: int, count: int) -> np.ndarray:
        ...


class ArrayEventSource:
    """In-memory sorted event stream; ``end_ns`` marks the end of the recording if known."""

    def __init__(self, events: np.ndarray, end_ns: Optional[int] = None):
        events = np.asarray(events, dtype=EVENT_DTYPE)
        if len(events) > 1 and np.any(np.diff(events['t'].astype(np.int64)) < 0):
            raise NonMonotonicTimestamps("Event stream is not sorted by timestamp")
        self.events = events
        self.end_ns = end_ns

    def _check_exhausted(self, start_ns: int) -> None:
        if self.end_ns is not None and start_ns >= self.end_ns:
            raise StreamExhausted(f"Stream ended at {self.end_ns} ns, before window start {start_ns} ns")

    def slice(self, start_ns: int, end_ns: int) -> np.ndarray:
        self._check_exhausted(start_ns)
        lo, hi = np.searchsorted(self.events['t'], np.array([start_ns, end_ns], dtype=np.uint64), side='left')
        return self.events[lo:hi]

    def slice_count(self, end_ns: int, count: int) -> np.ndarray:
        hi = int(np.searchsorted(self.events['t'], np.uint64(end_ns), side='left'))
        if hi == 0:
            self._check_exhausted(end_ns)
        return self.events[max(0, hi - count):hi]


def slice_window(stream: EventSource, t_start: float, t_end: float) -> EventVolume:
    if not t_start < t_end:
        raise ValueError(f"Window start {t_start} must precede its end {t_end}")
    start_ns, end_ns = seconds_to_ns(t_start), seconds_to_ns(t_end)
    return EventVolume(start_ns, end_ns, stream.slice(start_ns, end_ns))


def slice_count_window(stream: EventSource, t_end: float, count: int) -> EventVolume:
    end_ns = seconds_to_ns(t_end)
    events = stream.slice_count(end_ns, count)
    start_ns = int(events['t'][0]) if len(events) else end_ns - 1
    return EventVolume(start_ns, max(end_ns, start_ns + 1), events)


def decay_weights(t_rel: np.ndarray, alpha: float, eta: float, window_width: Optional[float] = None) -> np.ndarray:
    if not eta > 0:
        raise ValueError(f"Decay rate must be positive (got {eta})")
    t_rel = np.asarray(t_rel, dtype=float)
    t_rel = np.clip(t_rel, 0.0, window_width if window_width is not None else np.inf)
    return np.exp(-alpha * ((t_rel - eta / 2) / (eta / 6)) ** 2)


def decay_kernel(volume: EventVolume, alpha: float, eta: float) -> np.ndarray:
    return decay_weights(volume.relative_times(), alpha, eta, volume.width_seconds)


def channel_votes(t_rel: np.ndarray, bin_width: float, bins: int = NUM_CHANNELS) -> np.ndarray:
    """Triangular vote of each event time into ``bins`` channels centred at (i + 1/2) * bin_width."""
    if not bin_width > 0:
        raise ValueError(f"Bin width must be positive (got {bin_width})")
    centers = (np.arange(bins) + 0.5) * bin_width
    distance = np.abs(np.asarray(t_rel, dtype=float)[:, None] - centers[None, :]) / bin_width
    return np.maximum(0.0, 1.0 - distance)


@dataclass(frozen=True, eq=False)
class E3CT:
    channels: np.ndarray
    timestamp: float

    @staticmethod
    def zeros(shape: Tuple[int, int], timestamp: float) -> 'E3CT':
        return E3CT(np.zeros((NUM_CHANNELS,) + tuple(shape)), timestamp)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


def trilinear_vote(volume: EventVolume, weights: np.ndarray, shape: Tuple[int, int],
                   bin_width: Optional[float] = None, timestamp: float = 0.0) -> E3CT:
    height, width = shape
    bin_width = bin_width if bin_width is not None else volume.width_seconds / NUM_CHANNELS
    channels = np.zeros((NUM_CHANNELS, height, width))
    events = volume.events
    if len(events) == 0:
        return E3CT(channels, timestamp)
    x = events['x'].astype(np.intp)
    y = events['y'].astype(np.intp)
    inside = (x < width) & (y < height)
    if not inside.all():
        logger.warning("Dropping %d events outside the %dx%d sensor", int((~inside).sum()), width, height)
    votes = channel_votes(volume.relative_times()[inside], bin_width) * np.asarray(weights)[inside, None]
    for channel in range(NUM_CHANNELS):
        np.add.at(channels[channel], (y[inside], x[inside]), votes[:, channel])
    return E3CT(channels, timestamp)


def median_smooth(channels: np.ndarray, radius: int) -> np.ndarray:
    """One pass of a per-channel (2r+1)x(2r+1) median with edge replication."""
    if radius < 0:
        raise ValueError(f"Median radius must be non-negative (got {radius})")
    if radius == 0:
        return channels.copy()
    size = 2 * radius + 1
    return ndimage.median_filter(channels, size=(1, size, size), mode='nearest')


def postprocess(tensor: E3CT, median_radius: int, binary_threshold: float) -> E3CT:
    if not 0.0 <= binary_threshold <= 1.0:
        raise ValueError(f"Binary threshold must lie in [0, 1] (got {binary_threshold})")
    smoothed = tensor.channels
    for _ in range(MAX_MEDIAN_PASSES):
        passed = median_smooth(smoothed, median_radius)
        if np.array_equal(passed, smoothed):
            break
        smoothed = passed
    else:
        logger.debug("Median smoothing did not settle after %d passes", MAX_MEDIAN_PASSES)
    return E3CT((smoothed >= binary_threshold).astype(float), tensor.timestamp)


class WindowMode(Enum):
    TIME = 'time'
    COUNT = 'count'


@dataclass(frozen=True)
class EventConfig:
    alpha: float = 0.5
    eta: float = 0.030
    median_radius: int = 1
    binary_threshold: float = 0.05
    window_mode: WindowMode = WindowMode.TIME
    window_count: int = 20000
    parallel: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"events.eta must be positive (got {self.eta})")
        if self.median_radius < 0:
            raise ConfigError(f"events.median_radius must be non-negative (got {self.median_radius})")
        if not 0.0 <= self.binary_threshold <= 1.0:
            raise ConfigError(f"events.binary_threshold must lie in [0, 1] (got {self.binary_threshold})")
        if self.window_count <= 0:
            raise ConfigError(f"events.window_count must be positive (got {self.window_count})")


@dataclass(frozen=True, eq=False)
class StereoE3CT:
    left: E3CT
    right: E3CT
    timestamp: float
    event_counts: Tuple[int, int]


class E3CTBuilder:
    """Builds post-processed tensors for both event cameras of the rig, one window at a time."""

    def __init__(self, config: EventConfig, shape_left: Tuple[int, int], shape_right: Tuple[int, int]):
        self.config = config
        self.shapes = (shape_left, shape_right)

    def volume(self, stream: EventSource, schedule: SyncSchedule, k: int) -> EventVolume:
        if self.config.window_mode == WindowMode.COUNT:
            return slice_count_window(stream, float(schedule.fusion_times[k]), self.config.window_count)
        start, end = schedule.window(k)
        return slice_window(stream, start, end)

    def tensor(self, volume: EventVolume, shape: Tuple[int, int], timestamp: float) -> E3CT:
        cfg = self.config
        weights = decay_kernel(volume, cfg.alpha, cfg.eta)
        raw = trilinear_vote(volume, weights, shape, timestamp=timestamp)
        return postprocess(raw, cfg.median_radius, cfg.binary_threshold)

    def build_window(self, streams: Tuple[EventSource, EventSource], schedule: SyncSchedule, k: int,
                     executor: Optional[futures.Executor] = None) -> StereoE3CT:
        timestamp = float(schedule.fusion_times[k])
        volumes = [self.volume(stream, schedule, k) for stream in streams]
        if executor is not None:
            left, right = executor.map(self.tensor, volumes, self.shapes, [timestamp, timestamp])
        else:
            left, right = (self.tensor(v, s, timestamp) for v, s in zip(volumes, self.shapes))
        logger.debug("Window %d: %d/%d events", k, len(volumes[0]), len(volumes[1]))
        return StereoE3CT(left, right, timestamp, (len(volumes[0]), len(volumes[1])))


def build_e3ct(streams: Tuple[EventSource, EventSource], schedule: SyncSchedule, config: EventConfig,
               shape_left: Tuple[int, int], shape_right: Optional[Tuple[int, int]] = None) -> List[StereoE3CT]:
    """One stereo tensor pair per window between consecutive fusion timestamps."""
    builder = E3CTBuilder(config, shape_left, shape_right or shape_left)
    windows = range(1, len(schedule))
    if not config.parallel:
        return [builder.build_window(streams, schedule, k) for k in windows]
    with futures.ThreadPoolExecutor(max_workers=2) as executor:
        return [builder.build_window(streams, schedule, k, executor) for k in windows]

"""Trajectories in the TUM text format: ``timestamp tx ty tz qx qy qz qw`` per line, camera-to-world poses."""
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, TextIO, Union

import numpy as np

from lib.errors import DataError, ParseError
from lib.geometry import Pose

logger = logging.getLogger(__name__)

PathOrStream = Union[str, Path, TextIO]


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    timestamp: float
    pose: Pose


def _format_value(value: float) -> str:
    # adding 0.0 turns -0.0 into 0.0
    return np.format_float_positional(float(value) + 0.0, trim='-')


def format_record(record: TrajectoryRecord) -> str:
    values = list(record.pose.translation) + list(record.pose.quaternion)
    return f"{record.timestamp:.9f} " + " ".join(_format_value(v) for v in values)


def parse_record(line: str, line_number: int, source=None) -> TrajectoryRecord:
    fields = line.split()
    if len(fields) != 8:
        raise ParseError(source, line_number, f"expected 8 fields, found {len(fields)}")
    try:
        values = [float(f) for f in fields]
    except ValueError as e:
        raise ParseError(source, line_number, f"not a number: {e}") from e
    if not np.all(np.isfinite(values)):
        raise ParseError(source, line_number, "non-finite value")
    quaternion = np.array(values[4:])
    norm = np.linalg.norm(quaternion)
    if not norm > 0:
        raise ParseError(source, line_number, "zero quaternion")
    return TrajectoryRecord(values[0], Pose.from_quaternion(values[1:4], quaternion / norm))


def write_tum(records: Iterable[TrajectoryRecord], destination: PathOrStream) -> None:
    if isinstance(destination, (str, Path)):
        with Path(destination).open('w', encoding='utf-8') as f:
            write_tum(records, f)
        return
    for record in records:
        destination.write(format_record(record) + '\n')


def read_tum(source: PathOrStream) -> List[TrajectoryRecord]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise DataError(f"Trajectory file {path} not found")
        with path.open(encoding='utf-8') as f:
            return _read_lines(f, path)
    return _read_lines(source, None)


def _read_lines(stream: TextIO, path) -> List[TrajectoryRecord]:
    records: List[TrajectoryRecord] = []
    for number, line in enumerate(stream, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        record = parse_record(stripped, number, path)
        if records and record.timestamp <= records[-1].timestamp:
            raise ParseError(path, number, f"timestamp {record.timestamp} is not after {records[-1].timestamp}")
        records.append(record)
    logger.debug("Read %d poses from %s", len(records), path or '<stream>')
    return records


def dumps_tum(records: Iterable[TrajectoryRecord]) -> str:
    buffer = io.StringIO()
    write_tum(records, buffer)
    return buffer.getvalue()


def join_segments(segments: Sequence[Sequence[TrajectoryRecord]]) -> List[TrajectoryRecord]:
    """
    Chain trajectory segments recorded across restarts.

    Every segment restarts from its own origin; it is re-anchored so that its
    first pose coincides with the last pose of the joined trajectory so far.
    """
    joined: List[TrajectoryRecord] = []
    for segment in segments:
        if not segment:
            continue
        if not joined:
            joined.extend(segment)
            continue
        if segment[0].timestamp < joined[-1].timestamp:
            raise DataError(f"Segment starting at {segment[0].timestamp} overlaps the previous one "
                            f"ending at {joined[-1].timestamp}")
        anchor = joined[-1].pose.compose(segment[0].pose.inverse())
        rest = segment[1:] if segment[0].timestamp == joined[-1].timestamp else segment
        joined.extend(TrajectoryRecord(r.timestamp, anchor.compose(r.pose)) for r in rest)
    return joined

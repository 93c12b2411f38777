"""
The three cooperating workers of the hybrid tracker: tracking turns every fused
stereo frame into a pose, mapping refines the keyframes tracking promotes, and
loop closing corrects the drift when a keyframe revisits an earlier place.

In deterministic mode the workers run in a fixed order (track, map, close) for
every frame. Otherwise mapping and loop closing consume ordered queues in their
own threads, reading and committing through the shared map's snapshots.
"""
import logging
import queue
import time
from concurrent import futures
from contextlib import ExitStack, contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lib.config import RunConfig
from lib.datasets import SequenceAdapter, open_sequence
from lib.errors import StreamExhausted, TrackingLost
from lib.evaluation import write_report
from lib.events import ArrayEventSource, E3CTBuilder, StereoE3CT, compute_fusion_timestamps
from lib.features import make_detector
from lib.fusion import FusionFrame, FusionMode, FusionStage
from lib.geometry import Pose
from lib.loopclosure import LoopCandidate, LoopCloser, write_loop_log
from lib.mapping import Keyframe, Mapper, SharedMap, dump_map
from lib.tracking import Tracker
from lib.trajectory import TrajectoryRecord, join_segments, write_tum

logger = logging.getLogger(__name__)

WORKERS = ('tracking', 'mapping', 'loop_closing')


@dataclass(frozen=True)
class FusionRecord:
    frame_index: int
    timestamp: float
    beta: float
    mode: FusionMode
    feature_count: int


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """A tracked frame, stored against the keyframe it was tracked from so map corrections carry over."""
    timestamp: float
    keyframe_id: Optional[int]
    relative: Pose
    pose: Pose


def frame_trajectory(frames: Sequence[FrameRecord], keyframes: Mapping[int, Keyframe]) -> List[TrajectoryRecord]:
    """Camera-to-world poses re-derived from the keyframes' current poses; frames without one keep their own."""
    records = []
    for frame in frames:
        keyframe = keyframes.get(frame.keyframe_id) if frame.keyframe_id is not None else None
        pose = frame.relative.compose(keyframe.pose) if keyframe is not None else frame.pose
        records.append(TrajectoryRecord(frame.timestamp, pose.inverse()))
    return records


@dataclass
class Segment:
    """One map and the trajectory tracked against it; a restart after tracking loss opens a new one."""
    shared: SharedMap
    tracker: Tracker
    mapper: Mapper
    loop_closer: LoopCloser
    frames: List[FrameRecord] = field(default_factory=list)
    bootstrapped: bool = False

    def records(self) -> List[TrajectoryRecord]:
        return frame_trajectory(self.frames, self.shared.snapshot().keyframes)


@dataclass
class RunReport:
    frames: int
    tracked_frames: int
    keyframes: int
    map_points: int
    segments: int
    lost_frames: List[int]
    loops_closed: int
    loop_events: List[Dict[str, Any]]
    mode_counts: Dict[str, int]
    timings: Dict[str, float]
    deterministic: bool
    images_only: bool


def _loop_event(candidate: LoopCandidate) -> Dict[str, Any]:
    return dict(query_kf=candidate.query_kf, match_kf=candidate.match_kf, distance=round(candidate.distance, 6),
                inliers=candidate.inliers, verified=candidate.verified)


class HybridPtam:
    def __init__(self, config: RunConfig, sequence: Optional[SequenceAdapter] = None):
        if sequence is None:
            config.dataset.check()
            sequence = open_sequence(config.dataset.adapter, config.dataset.path, config.dataset.calibration)
        self.config = config
        self.sequence = sequence
        self.rig = config.alignment.apply(sequence.rig)
        self.detector = make_detector(config.detector)
        self.fusion = FusionStage(self.rig, config.fusion)
        self.builder = E3CTBuilder(config.events, self.rig.dvs_left.shape, self.rig.dvs_right.shape)
        self.schedule = compute_fusion_timestamps(sequence.frame_times, self.rig.exposure_time)
        self.streams: Optional[Tuple[ArrayEventSource, ArrayEventSource]] = None
        if not config.fusion.images_only:
            self.streams = sequence.event_streams()
        self.segments: List[Segment] = []
        self.lost_frames: List[int] = []
        self.fusion_log: List[FusionRecord] = []
        self.timings = {name: 0.0 for name in WORKERS}
        self._consecutive_lost = 0
        self._executor: Optional[futures.Executor] = None

    @contextmanager
    def _timed(self, worker: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[worker] += time.perf_counter() - start

    def _start_segment(self) -> Segment:
        cfg = self.config
        shared = SharedMap()
        segment = Segment(
            shared=shared,
            tracker=Tracker(shared, self.rig, self.detector, cfg.matching, cfg.tracking, cfg.solver),
            mapper=Mapper(shared, self.rig, cfg.matching, cfg.mapping, cfg.solver),
            loop_closer=LoopCloser(shared, self.rig, cfg.matching, cfg.loop_closure, cfg.solver,
                                   self.detector.distance_scale))
        if self.segments:
            logger.warning("Starting map segment %d after %d lost frames", len(self.segments),
                           self._consecutive_lost)
        self.segments.append(segment)
        self._consecutive_lost = 0
        return segment

    def _scene_depth(self, segment: Segment) -> Optional[float]:
        """Median depth of the map in front of the current pose, for warping events onto frames."""
        snapshot = segment.shared.snapshot()
        if not snapshot.points:
            return None
        positions = np.array([p.position for p in snapshot.points.values()])
        depth = segment.tracker.state.current_pose.transform(positions)[:, 2]
        depth = depth[depth > 0]
        return float(np.median(depth)) if len(depth) else None

    def _tensors(self, k: int) -> Optional[StereoE3CT]:
        if self.streams is None or k == 0:
            return None
        try:
            return self.builder.build_window(self.streams, self.schedule, k, self._executor)
        except StreamExhausted as e:
            logger.warning("No events for frame %d: %s", k, e)
            return None

    def fuse(self, k: int) -> FusionFrame:
        left, right = self.sequence.frames(k)
        feature_count = len(self.detector.detect(left))
        frame = self.fusion.process(left, right, self._tensors(k), float(self.sequence.frame_times[k]),
                                    feature_count, self._scene_depth(self.segments[-1]))
        self.fusion_log.append(FusionRecord(k, frame.timestamp, frame.beta, frame.mode, feature_count))
        return frame

    def track(self, k: int, frame: FusionFrame) -> Optional[Tuple[Segment, Keyframe]]:
        """Pose for frame ``k``; returns the keyframe to hand to mapping, if one was promoted."""
        segment = self.segments[-1]
        try:
            if not segment.bootstrapped:
                keyframe: Optional[Keyframe] = segment.tracker.bootstrap(frame, k)
                segment.bootstrapped = True
                assert keyframe is not None
                record = FrameRecord(frame.timestamp, keyframe.id, Pose.identity(), Pose.identity())
            else:
                result = segment.tracker.track_frame(frame, k)
                keyframe = result.keyframe
                record = FrameRecord(frame.timestamp, result.reference_id, result.relative, result.pose)
        except TrackingLost as e:
            logger.warning("%s", e)
            self.lost_frames.append(k)
            self._consecutive_lost += 1
            if segment.bootstrapped and self._consecutive_lost >= self.config.tracking.restart_after:
                self._start_segment()
            return None
        self._consecutive_lost = 0
        segment.frames.append(record)
        return (segment, keyframe) if keyframe is not None else None

    def map_keyframe(self, segment: Segment, keyframe: Keyframe, image: Optional[np.ndarray]) -> None:
        with self._timed('mapping'):
            segment.mapper.process(keyframe, image)

    def close_loops(self, segment: Segment, keyframe_id: int) -> None:
        if not self.config.loop_closure.enabled:
            return
        with self._timed('loop_closing'):
            segment.loop_closer.process(keyframe_id)

    def _run_deterministic(self) -> None:
        for k in range(len(self.sequence)):
            with self._timed('tracking'):
                frame = self.fuse(k)
                promoted = self.track(k, frame)
            if promoted is not None:
                segment, keyframe = promoted
                self.map_keyframe(segment, keyframe, frame.image_left)
                self.close_loops(segment, keyframe.id)

    def _mapping_worker(self, keyframes: queue.Queue, loops: queue.Queue) -> None:
        try:
            while True:
                item = keyframes.get()
                if item is None:
                    return
                segment, keyframe, image = item
                self.map_keyframe(segment, keyframe, image)
                loops.put((segment, keyframe.id))
        finally:
            loops.put(None)

    def _loop_worker(self, loops: queue.Queue) -> None:
        while True:
            item = loops.get()
            if item is None:
                return
            self.close_loops(*item)

    def _run_threaded(self) -> None:
        keyframes: queue.Queue = queue.Queue()
        loops: queue.Queue = queue.Queue()
        with futures.ThreadPoolExecutor(max_workers=2) as executor:
            mapping = executor.submit(self._mapping_worker, keyframes, loops)
            closing = executor.submit(self._loop_worker, loops)
            try:
                for k in range(len(self.sequence)):
                    if mapping.done():
                        break
                    with self._timed('tracking'):
                        frame = self.fuse(k)
                        bootstrapping = not self.segments[-1].bootstrapped
                        promoted = self.track(k, frame)
                    if promoted is None:
                        continue
                    segment, keyframe = promoted
                    if bootstrapping:
                        # tracking needs the first map before it can follow the next frame
                        self.map_keyframe(segment, keyframe, frame.image_left)
                        loops.put((segment, keyframe.id))
                    else:
                        keyframes.put((segment, keyframe, frame.image_left))
            finally:
                keyframes.put(None)
            mapping.result()
            closing.result()

    def run(self) -> RunReport:
        logger.info("Running on %d frames (%s mode)", len(self.sequence),
                    'deterministic' if self.config.deterministic else 'threaded')
        self._start_segment()
        with ExitStack() as stack:
            if self.config.events.parallel:
                self._executor = stack.enter_context(futures.ThreadPoolExecutor(max_workers=2))
            if self.config.deterministic:
                self._run_deterministic()
            else:
                self._run_threaded()
        self._executor = None
        report = self.report()
        logger.info("Tracked %d of %d frames, %d keyframes, %d loops closed, %d lost frames",
                    report.tracked_frames, report.frames, report.keyframes, report.loops_closed,
                    len(report.lost_frames))
        return report

    def trajectory(self) -> List[TrajectoryRecord]:
        """Camera-to-world poses of every tracked frame, segments chained end to start."""
        return join_segments([segment.records() for segment in self.segments])

    def anchors(self) -> List[Pose]:
        """Per segment, the pose that moves its map into the joined trajectory's frame."""
        joined = {record.timestamp: record.pose for record in self.trajectory()}
        anchors = []
        for segment in self.segments:
            records = segment.records()
            if records and records[0].timestamp in joined:
                first = records[0]
                anchors.append(joined[first.timestamp].compose(first.pose.inverse()))
            else:
                anchors.append(anchors[-1] if anchors else Pose.identity())
        return anchors

    def keyframe_trajectory(self) -> List[TrajectoryRecord]:
        records = []
        for segment, anchor in zip(self.segments, self.anchors()):
            snapshot = segment.shared.snapshot()
            records.extend(TrajectoryRecord(kf.timestamp, anchor.compose(kf.pose.inverse()))
                           for kf in (snapshot.keyframes[kid] for kid in snapshot.keyframe_ids()))
        return sorted(records, key=lambda r: r.timestamp)

    def loop_events(self) -> List[LoopCandidate]:
        return [event for segment in self.segments for event in segment.loop_closer.events]

    def report(self) -> RunReport:
        snapshots = [segment.shared.snapshot() for segment in self.segments]
        return RunReport(
            frames=len(self.sequence),
            tracked_frames=sum(len(segment.frames) for segment in self.segments),
            keyframes=sum(len(s.keyframes) for s in snapshots),
            map_points=sum(len(s.points) for s in snapshots),
            segments=len(self.segments),
            lost_frames=list(self.lost_frames),
            loops_closed=sum(len(segment.loop_closer.loops) for segment in self.segments),
            loop_events=[_loop_event(event) for event in self.loop_events()],
            mode_counts={mode.value: count for mode, count in self.fusion.mode_counts.items()},
            timings={name: round(seconds, 6) for name, seconds in self.timings.items()},
            deterministic=self.config.deterministic,
            images_only=self.config.fusion.images_only)

    def write_outputs(self, report: RunReport) -> None:
        output = self.config.output
        for path in (output.trajectory, output.keyframes, output.map, output.report, output.loop_log):
            Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_tum(self.trajectory(), output.trajectory)
        write_tum(self.keyframe_trajectory(), output.keyframes)
        Path(output.map).write_text('', encoding='utf-8')
        for segment, anchor in zip(self.segments, self.anchors()):
            dump_map(segment.shared.snapshot(), output.map, anchor=anchor, append=True)
        write_loop_log(self.loop_events(), output.loop_log)
        write_report(asdict(report), output.report)
        logger.info("Wrote trajectory to %s and report to %s", output.trajectory, output.report)


def run_pipeline(config: RunConfig, sequence: Optional[SequenceAdapter] = None) -> RunReport:
    ptam = HybridPtam(config, sequence)
    report = ptam.run()
    ptam.write_outputs(report)
    if report.tracked_frames == 0:
        raise TrackingLost(f"None of the {report.frames} frames could be tracked")
    return report

"""
Window-width ablation: the same instant seen through event tensors built from
windows of growing width, or from a fixed number of the latest events.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

from lib.datasets import SequenceAdapter
from lib.errors import ConfigError
from lib.events import E3CTBuilder, EventConfig, slice_count_window, slice_window
from lib.plotting import save_tensor_image

logger = logging.getLogger(__name__)

ABLATION_HEADER = ['window', 'value', 'events', 'image']


@dataclass(frozen=True)
class AblationRow:
    window: str
    value: float
    events: int
    image: str


def ablate_windows(sequence: SequenceAdapter, config: EventConfig, widths_ms: Sequence[float],
                   output_dir: Union[str, Path], frame_index: Optional[int] = None,
                   counts: Sequence[int] = ()) -> List[AblationRow]:
    """One left-camera tensor snapshot per window width (ms) and per event count, ending at one frame."""
    if not widths_ms and not counts:
        raise ConfigError("Give at least one window width or event count")
    if any(not width > 0 for width in widths_ms):
        raise ConfigError(f"Window widths must be positive (got {list(widths_ms)})")
    if any(count <= 0 for count in counts):
        raise ConfigError(f"Event counts must be positive (got {list(counts)})")
    k = len(sequence) // 2 if frame_index is None else frame_index
    if not 0 <= k < len(sequence):
        raise ConfigError(f"Frame {k} is outside the sequence of {len(sequence)} frames")

    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    stream, _ = sequence.event_streams()
    shape = sequence.rig.dvs_left.shape
    builder = E3CTBuilder(config, shape, shape)
    t_end = float(sequence.frame_times[k])

    rows = []
    for width in widths_ms:
        t_start = max(t_end - width / 1000.0, 0.0)
        if not t_start < t_end:
            raise ConfigError(f"Frame {k} at t={t_end} leaves no room for a window before it")
        volume = slice_window(stream, t_start, t_end)
        image = output / f'width_{width:g}ms.png'
        save_tensor_image(builder.tensor(volume, shape, t_end).channels, image)
        rows.append(AblationRow('width_ms', float(width), len(volume), image.name))
    for count in counts:
        volume = slice_count_window(stream, t_end, count)
        image = output / f'count_{count}.png'
        save_tensor_image(builder.tensor(volume, shape, t_end).channels, image)
        rows.append(AblationRow('count', float(count), len(volume), image.name))

    with (output / 'windows.csv').open('w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow([row.window, f'{row.value:g}', row.events, row.image])
    logger.info("Ablation at frame %d: %s", k, ', '.join(f'{r.value:g} {r.window} -> {r.events}' for r in rows))
    return rows

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib
import numpy as np

from lib.errors import DataError
from lib.trajectory import TrajectoryRecord

matplotlib.use('Agg')
# pylint: disable=wrong-import-position
from matplotlib import image as mpimg
from matplotlib import pyplot as plt

logger = logging.getLogger(__name__)

PLOT_DPI = 90
MAX_CLOUD_POINTS = 20000


def gap_segments(stamps: np.ndarray, xyz: np.ndarray):
    """Split a path wherever consecutive timestamps are more than twice the median interval apart."""
    if len(stamps) < 2:
        return [xyz]
    interval = np.median(np.diff(stamps))
    breaks = np.nonzero(np.diff(stamps) >= 2 * interval)[0] + 1
    return np.split(xyz, breaks)


def _plot_path(ax, stamps: np.ndarray, xyz: np.ndarray, color: str, label: str) -> None:
    for segment in gap_segments(stamps, xyz):
        ax.plot(segment[:, 0], segment[:, 1], '-', color=color, label=label)
        label = ''


def plot_trajectories(path: Union[str, Path], estimate: Sequence[TrajectoryRecord],
                      reference: Optional[np.ndarray] = None, aligned: Optional[np.ndarray] = None,
                      points: Optional[np.ndarray] = None, title: str = '') -> None:
    """
    Top view (x, y) of an estimated trajectory. With ``aligned`` and ``reference``
    the associated, aligned estimate is drawn over the ground truth instead.
    """
    fig, ax = plt.subplots()
    try:
        if points is not None and len(points):
            cloud = points[:MAX_CLOUD_POINTS]
            ax.scatter(cloud[:, 0], cloud[:, 1], s=1, color='grey', label='map')
        if reference is not None and aligned is not None:
            ax.plot(reference[:, 0], reference[:, 1], '-', color='black', label='ground truth')
            ax.plot(aligned[:, 0], aligned[:, 1], '-', color='blue', label='estimated')
        else:
            stamps = np.array([r.timestamp for r in estimate])
            xyz = np.array([r.pose.translation for r in estimate]).reshape(-1, 3)
            _plot_path(ax, stamps, xyz, 'blue', 'estimated')
        ax.set_title(title)
        ax.set_xlabel('x [m]')
        ax.set_ylabel('y [m]')
        ax.set_aspect('equal', adjustable='datalim')
        ax.legend()
        fig.savefig(path, dpi=PLOT_DPI)
    finally:
        plt.close(fig)
    logger.info("Wrote plot %s", path)


def save_tensor_image(channels: np.ndarray, path: Union[str, Path]) -> None:
    """A three-channel event tensor as an RGB image."""
    rgb = np.clip(np.moveaxis(np.asarray(channels, dtype=float), 0, -1), 0.0, 1.0)
    mpimg.imsave(path, rgb)


def read_cloud(path: Union[str, Path]) -> np.ndarray:
    """Positions from a map dump (``x y z r g b`` lines)."""
    if not Path(path).is_file():
        raise DataError(f"Map file {path} not found")
    data = np.loadtxt(path, ndmin=2)
    return data[:, :3] if data.size else np.empty((0, 3))

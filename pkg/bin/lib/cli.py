import functools
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import click
import yaml

from lib.ablation import ablate_windows
from lib.calibration import dump_calibration, load_calibration
from lib.config import Profile, load_run_config
from lib.config_safe_loader import ConfigSafeLoader
from lib.datasets import ADAPTER_TYPES, open_sequence
from lib.errors import ConfigError, HybridPtamError
from lib.evaluation import AlignmentMode, aligned_positions, evaluate, write_report
from lib.fusion import calibrate_alignment, read_match_file
from lib.geometry import Side
from lib.pipeline import run_pipeline
from lib.plotting import plot_trajectories, read_cloud
from lib.simulator import NoiseSpec, TrajectoryKind, TrajectorySpec, make_scene, simulate, write_sequence
from lib.trajectory import read_tum

logger = logging.getLogger('hybrid_ptam')

DEFAULT_ABLATION_WIDTHS = (5.0, 10.0, 20.0, 40.0)


def reports_errors(func):
    """Log library errors and exit with their code instead of a traceback."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except HybridPtamError as e:
            logger.error("%s", e)
            raise click.exceptions.Exit(e.exit_code) from e

    return wrapper


def parse_settings(settings: Sequence[str]) -> Dict[str, Any]:
    """``section.key=value`` pairs, with values read as YAML scalars."""
    overrides = {}
    for setting in settings:
        key, sep, value = setting.partition('=')
        if not sep or not key:
            raise ConfigError(f"Setting '{setting}' must look like section.key=value")
        try:
            overrides[key.strip()] = yaml.load(value, Loader=ConfigSafeLoader)
        except yaml.YAMLError as e:
            raise ConfigError(f"Unable to read value of setting '{setting}': {e}") from e
    return overrides


def dataset_options(func):
    for option in reversed([
            click.option('--profile', type=click.Choice([p.value for p in Profile]),
                         help='Dataset profile supplying defaults'),
            click.option('--dataset', metavar='DIR', help='Sequence directory'),
            click.option('--adapter', type=click.Choice(sorted(ADAPTER_TYPES)), help='Dataset layout'),
            click.option('--calibration', metavar='FILE', help='Calibration YAML (default DIR/calibration.yaml)'),
            click.option('--set', 'settings', multiple=True, metavar='KEY=VALUE',
                         help='Override any configuration key, e.g. fusion.beta_cap=0'),
    ]):
        func = option(func)
    return func


def dataset_overrides(profile, dataset, adapter, calibration, settings) -> Dict[str, Any]:
    overrides = parse_settings(settings)
    overrides.update({'profile': profile, 'dataset.path': dataset, 'dataset.adapter': adapter,
                      'dataset.calibration': calibration})
    return overrides


@click.group()
@click.option('--debug/--no-debug', help='Turn on debugging')
@click.option('--log', metavar='LOGFILE', help='Log to LOGFILE')
@click.option('--log-to-console', is_flag=True, help='Log to the console even when logging to a file')
def cli(debug: bool, log: Optional[str], log_to_console: bool):
    formatter = logging.Formatter(fmt='%(asctime)s %(name)-15s %(levelname)-8s %(message)s')
    handlers = []
    if log:
        file_handler = logging.FileHandler(log)
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)
    if not log or log_to_console:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        handlers.append(console_handler)
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, handlers=handlers, force=True)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)


@cli.command()
@click.argument('config_file', required=False, metavar='CONFIG')
@dataset_options
@click.option('--output-dir', metavar='DIR', help='Directory for the trajectory, map and report')
@click.option('--seed', type=int, help='Seed for every random choice')
@click.option('--deterministic/--threaded', default=None,
              help='Run the workers in lock-step on one thread, or concurrently')
@click.option('--no-loop-closure', is_flag=True, help='Disable loop detection')
@click.option('--images-only', is_flag=True, help='Ignore the event streams (fusion weight 0)')
@reports_errors
def run(config_file: Optional[str], profile, dataset, adapter, calibration, settings, output_dir: Optional[str],
        seed: Optional[int], deterministic: Optional[bool], no_loop_closure: bool, images_only: bool):
    """Track a sequence and write its trajectory, keyframes, map and report."""
    overrides = dataset_overrides(profile, dataset, adapter, calibration, settings)
    overrides.update({'output_dir': output_dir, 'seed': seed, 'deterministic': deterministic,
                      'loop_closure.enabled': False if no_loop_closure else None,
                      'fusion.images_only': True if images_only else None})
    config = load_run_config(config_file, overrides)
    report = run_pipeline(config)
    click.echo(f"Tracked {report.tracked_frames}/{report.frames} frames, {report.keyframes} keyframes, "
               f"{report.map_points} map points, {report.loops_closed} loops closed")
    click.echo(f"Trajectory written to {config.output.trajectory}")


@cli.command(name='eval')
@click.argument('estimate')
@click.argument('ground_truth')
@click.option('--mode', type=click.Choice([m.value for m in AlignmentMode]), default=AlignmentMode.SE3.value,
              show_default=True, help='Alignment before measuring the absolute error')
@click.option('--delta', type=click.IntRange(min=1), default=1, show_default=True,
              help='Frame gap of the relative pose error')
@click.option('--report', 'report_path', metavar='FILE', help='Write the metrics as JSON')
@click.option('--plot', 'plot_path', metavar='FILE', help='Draw the aligned estimate over the ground truth')
@reports_errors
def eval_command(estimate: str, ground_truth: str, mode: str, delta: int, report_path: Optional[str],
                 plot_path: Optional[str]):
    """Absolute and relative trajectory error of ESTIMATE against GROUND_TRUTH."""
    est, gt = read_tum(estimate), read_tum(ground_truth)
    alignment = AlignmentMode(mode)
    report = evaluate(est, gt, alignment, delta)
    for key in sorted(report):
        click.echo(f"{key:<12} {report[key]}")
    if report_path:
        write_report(report, report_path)
    if plot_path:
        aligned, reference = aligned_positions(est, gt, alignment)
        plot_trajectories(plot_path, est, reference=reference, aligned=aligned,
                          title=f"ATE {report['ate_rmse']:.3f} m ({mode})")


@cli.command(name='calibrate-align')
@click.argument('calibration_file', metavar='CALIBRATION')
@click.argument('matches', metavar='MATCHES')
@click.option('--side', type=click.Choice([s.value for s in Side]), default=Side.LEFT.value, show_default=True)
@click.option('--write', is_flag=True, help='Store the offset in the calibration file')
@reports_errors
def calibrate_align(calibration_file: str, matches: str, side: str, write: bool):
    """
    Estimate the event-to-frame pixel offset from MATCHES, a CSV of frame pixels
    and the same features in events warped with a zero offset (fx,fy,ex,ey).
    """
    rig = load_calibration(calibration_file)
    frame_px, warped_px = read_match_file(matches)
    estimate = calibrate_alignment(frame_px, warped_px)
    click.echo(f"{side} offset: {estimate.offset[0]:.4f} {estimate.offset[1]:.4f} "
               f"(RMS {estimate.rms:.4f} px over {estimate.count} matches)")
    if write:
        dump_calibration(rig.with_alignment(Side(side), estimate.offset), calibration_file)
        logger.info("Updated %s", calibration_file)


@cli.command(name='simulate')
@click.argument('output_dir', metavar='OUTDIR')
@click.option('--trajectory', 'kind', type=click.Choice([k.value for k in TrajectoryKind]),
              default=TrajectoryKind.FIGURE_EIGHT.value, show_default=True)
@click.option('--duration', type=float, default=TrajectorySpec.duration, show_default=True, help='Seconds')
@click.option('--rate', type=float, default=TrajectorySpec.rate, show_default=True, help='Frames per second')
@click.option('--amplitude', type=float, default=TrajectorySpec.amplitude, show_default=True, help='Metres')
@click.option('--landmarks', type=click.IntRange(min=1), default=80, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--pixel-sigma', type=float, default=NoiseSpec.pixel_sigma, show_default=True,
              help='Frame noise standard deviation')
@click.option('--event-jitter', type=float, default=NoiseSpec.event_jitter, show_default=True,
              help='Event timestamp jitter in seconds')
@click.option('--contrast-threshold', type=float, default=NoiseSpec.contrast_threshold, show_default=True)
@click.option('--dim', type=(float, float), default=None, metavar='START END',
              help='Darken the frames over this interval (seconds)')
@click.option('--dim-factor', type=float, default=0.02, show_default=True)
@reports_errors
def simulate_command(output_dir: str, kind: str, duration: float, rate: float, amplitude: float, landmarks: int,
                     seed: int, pixel_sigma: float, event_jitter: float, contrast_threshold: float,
                     dim: Optional[Tuple[float, float]], dim_factor: float):
    """Write a synthetic stereo frame and event sequence with ground truth to OUTDIR."""
    spec = make_scene(TrajectorySpec(TrajectoryKind(kind), duration, rate, amplitude), landmark_count=landmarks,
                      seed=seed, noise=NoiseSpec(pixel_sigma, event_jitter, contrast_threshold),
                      dim_intervals=(dim,) if dim else (), dim_factor=dim_factor)
    write_sequence(simulate(spec), output_dir)
    click.echo(f"Wrote {spec.trajectory.frame_count} frames to {output_dir}")


@cli.command(name='ablate-windows')
@click.argument('config_file', required=False, metavar='CONFIG')
@dataset_options
@click.option('--width', 'widths', type=float, multiple=True, metavar='MS', help='Window width in milliseconds')
@click.option('--count', 'counts', type=int, multiple=True, metavar='N', help='Latest N events instead')
@click.option('--frame', type=int, help='Frame the windows end at (default: the middle one)')
@click.option('--output-dir', required=True, metavar='DIR')
@reports_errors
def ablate_windows_command(config_file: Optional[str], profile, dataset, adapter, calibration, settings,
                           widths: Tuple[float, ...], counts: Tuple[int, ...], frame: Optional[int], output_dir: str):
    """Event tensor snapshots of one instant under different window widths."""
    config = load_run_config(config_file, dataset_overrides(profile, dataset, adapter, calibration, settings))
    sequence = open_sequence(config.dataset.adapter, config.dataset.path, config.dataset.calibration)
    if not widths and not counts:
        widths = DEFAULT_ABLATION_WIDTHS
    for row in ablate_windows(sequence, config.events, widths, output_dir, frame, counts):
        click.echo(f"{row.window:<9} {row.value:>9g} {row.events:>9} {row.image}")


@cli.command(name='plot')
@click.argument('trajectory')
@click.option('--ground-truth', metavar='FILE', help='Align to and draw this trajectory too')
@click.option('--mode', type=click.Choice([m.value for m in AlignmentMode]), default=AlignmentMode.SE3.value,
              show_default=True)
@click.option('--map', 'map_path', metavar='FILE', help='Map point dump to draw underneath (unaligned plots only)')
@click.option('--output', required=True, metavar='FILE', help='Image to write')
@reports_errors
def plot_command(trajectory: str, ground_truth: Optional[str], mode: str, map_path: Optional[str], output: str):
    """Top view of a trajectory, optionally over its ground truth and map."""
    estimate = read_tum(trajectory)
    if ground_truth:
        aligned, reference = aligned_positions(estimate, read_tum(ground_truth), AlignmentMode(mode))
        plot_trajectories(output, estimate, reference=reference, aligned=aligned, title=Path(trajectory).name)
    else:
        points = read_cloud(map_path) if map_path else None
        plot_trajectories(output, estimate, points=points, title=Path(trajectory).name)


def main():
    cli(prog_name='hybrid_ptam')  # pylint: disable=no-value-for-parameter


if __name__ == '__main__':
    main()

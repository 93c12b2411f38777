"""
Run configuration: dataset profile defaults, overlaid by a YAML run file, overlaid
by command-line flags. Every section is a frozen dataclass owned by the module it
configures; this module only parses, merges and validates.
"""
import copy
import logging
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union, get_args, get_origin, get_type_hints

import yaml

from lib.config_expand import expand_target
from lib.config_safe_loader import ConfigSafeLoader
from lib.datasets import ADAPTER_TYPES, CALIBRATION_FILE
from lib.errors import ConfigError
from lib.events import EventConfig
from lib.features import DetectorConfig, MatchingParams
from lib.fusion import FusionConfig
from lib.geometry import RigCalibration
from lib.loopclosure import LoopClosureConfig
from lib.mapping import MappingConfig
from lib.solver import SolverConfig
from lib.tracking import TrackingConfig

logger = logging.getLogger(__name__)

PROFILE_DIR = Path(__file__).resolve().parent.parent / 'yaml' / 'profiles'

T = TypeVar('T')


class Profile(Enum):
    VECTOR = 'vector'
    TUM_VIE = 'tum-vie'
    SIMULATOR = 'simulator'


@dataclass(frozen=True)
class DatasetConfig:
    path: str = ''
    adapter: str = Profile.SIMULATOR.value
    calibration: Optional[str] = None

    def __post_init__(self):
        if self.adapter not in ADAPTER_TYPES:
            raise ConfigError(f"dataset.adapter must be one of {', '.join(sorted(ADAPTER_TYPES))} "
                              f"(got '{self.adapter}')")

    @property
    def calibration_path(self) -> Path:
        return Path(self.calibration) if self.calibration else Path(self.path) / CALIBRATION_FILE

    def check(self) -> None:
        if not self.path:
            raise ConfigError("dataset.path is required")
        if not Path(self.path).is_dir():
            raise ConfigError(f"dataset.path {self.path} not found")
        if not self.calibration_path.is_file():
            raise ConfigError(f"Calibration file {self.calibration_path} not found")


@dataclass(frozen=True)
class AlignmentConfig:
    """Pixel offsets between warped events and frames; unset sides keep the calibration's values."""
    left: Optional[Tuple[float, float]] = None
    right: Optional[Tuple[float, float]] = None

    def apply(self, rig: RigCalibration) -> RigCalibration:
        return replace(rig,
                       align_left=rig.align_left if self.left is None else self.left,
                       align_right=rig.align_right if self.right is None else self.right)


@dataclass(frozen=True)
class OutputConfig:
    trajectory: str = '{output_dir}/trajectory.txt'
    keyframes: str = '{output_dir}/keyframes.txt'
    map: str = '{output_dir}/map.txt'
    report: str = '{output_dir}/report.json'
    loop_log: str = '{output_dir}/loops.csv'


@dataclass(frozen=True)
class RunConfig:
    profile: Profile = Profile.SIMULATOR
    seed: int = 0
    deterministic: bool = False
    output_dir: str = 'out'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    matching: MatchingParams = field(default_factory=MatchingParams)
    events: EventConfig = field(default_factory=EventConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    loop_closure: LoopClosureConfig = field(default_factory=LoopClosureConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


SECTIONS: Dict[str, Type[Any]] = {
    'dataset': DatasetConfig,
    'alignment': AlignmentConfig,
    'matching': MatchingParams,
    'events': EventConfig,
    'fusion': FusionConfig,
    'detector': DetectorConfig,
    'solver': SolverConfig,
    'tracking': TrackingConfig,
    'mapping': MappingConfig,
    'loop_closure': LoopClosureConfig,
    'output': OutputConfig,
}
SCALARS = tuple(f.name for f in fields(RunConfig) if f.name not in SECTIONS)


def _coerce(path: str, hint: Any, value: Any) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        return _coerce(path, next(a for a in get_args(hint) if a is not type(None)), value)
    if origin is tuple:
        args = get_args(hint)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path} must be a list of {len(args)} values (got {value!r})")
        return tuple(_coerce(f"{path}[{i}]", a, v) for i, (a, v) in enumerate(zip(args, value)))
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError as e:
            choices = ', '.join(str(m.value) for m in hint)
            raise ConfigError(f"{path} must be one of {choices} (got {value!r})") from e
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false (got {value!r})")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer (got {value!r})")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number (got {value!r})")
        return float(value)
    if hint is str:
        if isinstance(value, (bool, list, dict)) or value is None:
            raise ConfigError(f"{path} must be a string (got {value!r})")
        return str(value)
    return value


def parse_section(cls: Type[T], path: str, values: Any) -> T:
    """Build one section dataclass from a mapping, naming the key path on any error."""
    if values is None:
        return cls()
    if not isinstance(values, Mapping):
        raise ConfigError(f"{path} must be a mapping (got {values!r})")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}  # type: ignore
    unknown = sorted(str(k) for k in values if k not in known)
    if unknown:
        raise ConfigError(f"Unknown key {path}.{unknown[0]} (expected one of {', '.join(sorted(known))})")
    kwargs = {key: _coerce(f"{path}.{key}", hints[key], value) for key, value in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def merge(base: Mapping[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_overrides(document: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Overlay dotted keys (``loop_closure.enabled``); ``None`` values mean "not given"."""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = nested
        *parents, leaf = dotted.split('.')
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = value
    return merge(document, nested)


def load_document(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Configuration file {path} not found")
    try:
        with path.open(encoding='utf-8') as f:
            document = yaml.load(f, Loader=ConfigSafeLoader)
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed configuration {path}: {e}") from e
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"Configuration {path} must be a mapping")
    return document


def profile_defaults(profile: Union[str, Profile]) -> Dict[str, Any]:
    profile = _coerce('profile', Profile, profile.value if isinstance(profile, Profile) else profile)
    return load_document(PROFILE_DIR / f'{profile.value}.yaml')


def _expand_outputs(document: Mapping[str, Any]) -> Tuple[str, Dict[str, Any]]:
    outputs = document.get('output') or {}
    if not isinstance(outputs, Mapping):
        raise ConfigError(f"output must be a mapping (got {outputs!r})")
    defaults = {f.name: f.default for f in fields(OutputConfig)}
    unknown = sorted(str(k) for k in outputs if k not in defaults)
    if unknown:
        raise ConfigError(f"Unknown key output.{unknown[0]} (expected one of {', '.join(sorted(defaults))})")
    context: Dict[str, Any] = {**defaults, **outputs}
    context.update(output_dir=str(document.get('output_dir', RunConfig.output_dir)),
                   profile=str(document.get('profile', Profile.SIMULATOR.value)),
                   seed=document.get('seed', 0))
    expand_target(context, ['output'])
    return context['output_dir'], {key: context[key] for key in defaults}


def run_config_from_dict(document: Mapping[str, Any]) -> RunConfig:
    unknown = sorted(str(k) for k in document if k not in SECTIONS and k not in SCALARS)
    if unknown:
        raise ConfigError(f"Unknown key {unknown[0]} (expected one of {', '.join(sorted((*SECTIONS, *SCALARS)))})")
    output_dir, outputs = _expand_outputs(document)
    hints = get_type_hints(RunConfig)
    scalars = {key: _coerce(key, hints[key], document[key]) for key in SCALARS if key in document}
    scalars['output_dir'] = output_dir
    sections = {name: parse_section(cls, name, outputs if name == 'output' else document.get(name))
                for name, cls in SECTIONS.items()}
    config = RunConfig(**scalars, **sections)
    return replace(config, loop_closure=replace(config.loop_closure, seed=config.seed))


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None,
                    check_paths: bool = True) -> RunConfig:
    """
    Profile defaults < YAML file < overrides. The profile is taken from the
    overrides, then the file, then defaults to the simulator.
    """
    overrides = dict(overrides or {})
    document = load_document(path) if path is not None else {}
    profile = overrides.get('profile') or document.get('profile') or Profile.SIMULATOR.value
    merged = apply_overrides(merge(profile_defaults(profile), document), overrides)
    merged['profile'] = profile
    config = run_config_from_dict(merged)
    if check_paths:
        config.dataset.check()
    logger.debug("Run configuration: %s", config)
    return config

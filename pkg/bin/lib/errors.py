from pathlib import Path
from typing import Optional, Union

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRACKING = 4


class HybridPtamError(RuntimeError):
    exit_code = 1


class ConfigError(HybridPtamError):
    exit_code = EXIT_CONFIG


class CalibrationError(HybridPtamError):
    exit_code = EXIT_CONFIG


class DataError(HybridPtamError):
    exit_code = EXIT_DATA


class NonPositiveDepth(HybridPtamError):
    pass


class DegenerateRays(HybridPtamError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class StreamExhausted(DataError):
    pass


class DimensionMismatch(HybridPtamError):
    pass


class InsufficientMatches(HybridPtamError):
    pass


class DetectorFailure(HybridPtamError):
    exit_code = EXIT_CONFIG


class SolverError(HybridPtamError):
    pass


class SingularNormalEquations(SolverError):
    pass


class NonFiniteResidual(SolverError):
    pass


class DivergedPose(HybridPtamError):
    pass


class TrackingLost(HybridPtamError):
    exit_code = EXIT_TRACKING


class NoFeatures(HybridPtamError):
    pass


class VerificationFailed(HybridPtamError):
    pass


class DegenerateConfiguration(HybridPtamError):
    pass


class NoAssociations(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path: Optional[Union[str, Path]], line: int, message: str):
        super().__init__(f"{path or '<stream>'}:{line}: {message}")
        self.path = path
        self.line = line

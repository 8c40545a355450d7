"""Exception hierarchy.

Every error carries a stable machine-readable ``code`` that the command line
prints on failure.
"""

from __future__ import annotations


class DesaeError(Exception):
    code = "E_DESAE"


class IoFailure(DesaeError, OSError):
    code = "E_IO"


class MalformedRecord(DesaeError, ValueError):
    code = "E_MALFORMED_RECORD"

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyChain(DesaeError, ValueError):
    code = "E_EMPTY_CHAIN"


class LengthMismatch(DesaeError, ValueError):
    code = "E_LENGTH_MISMATCH"


class DuplicatePairId(DesaeError, ValueError):
    code = "E_DUPLICATE_PAIR_ID"


class UnknownSplit(DesaeError, ValueError):
    code = "E_UNKNOWN_SPLIT"


class MissingPlddt(DesaeError, ValueError):
    code = "E_MISSING_PLDDT"


class DegenerateGeometry(DesaeError, ValueError):
    code = "E_DEGENERATE_GEOMETRY"


class TooFewPoints(DesaeError, ValueError):
    code = "E_TOO_FEW_POINTS"


class NoEligibleResidues(DesaeError, ValueError):
    code = "E_NO_ELIGIBLE_RESIDUES"


class EmptySampleSet(DesaeError, ValueError):
    code = "E_EMPTY_SAMPLE_SET"


class BinMismatch(DesaeError, ValueError):
    code = "E_BIN_MISMATCH"


class ZeroVector(DesaeError, ValueError):
    code = "E_ZERO_VECTOR"


class ShapeMismatch(DesaeError, ValueError):
    code = "E_SHAPE_MISMATCH"


class NonFiniteValue(DesaeError, FloatingPointError):
    code = "E_NON_FINITE"


class DisconnectedGraph(DesaeError, RuntimeError):
    code = "E_DISCONNECTED_GRAPH"


class NonFiniteLoss(DesaeError, FloatingPointError):
    code = "E_NON_FINITE_LOSS"


class EmptySplit(DesaeError, ValueError):
    code = "E_EMPTY_SPLIT"


class InvalidDistribution(DesaeError, ValueError):
    code = "E_INVALID_DISTRIBUTION"


class CheckpointError(DesaeError, ValueError):
    code = "E_CHECKPOINT"


class ConfigError(DesaeError, ValueError):
    code = "E_CONFIG"

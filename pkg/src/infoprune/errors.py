"""Exception hierarchy shared by every module.

Each error maps onto one CLI exit-code class through ``exit_code``.
"""

from __future__ import annotations


class InfoPruneError(Exception):
    exit_code = 1


class ValidationError(InfoPruneError, ValueError):
    exit_code = 2


class NumericalError(InfoPruneError, ArithmeticError):
    exit_code = 4


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class InvalidConfig(ValidationError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InvalidHeadIndex(ValidationError):
    pass


class InvalidThreshold(ValidationError):
    pass


class InvalidRank(ValidationError):
    pass


class InvalidRankPair(ValidationError):
    pass


class EmptySpectrum(ValidationError):
    pass


class MissingGates(ValidationError):
    pass


class EmptyLayer(ValidationError):
    pass


class ZeroSpectrum(NumericalError):
    pass


class ZeroNorm(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class DegenerateSingularValue(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")


class DegenerateScope(NumericalError):
    pass


class CheckpointError(InfoPruneError):
    """Raised for any malformed checkpoint file; ``field`` names the culprit."""

    exit_code = 3

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class CorruptHeader(CheckpointError):
    pass


class TruncatedData(CheckpointError):
    pass


class OversizeTensor(CheckpointError):
    pass

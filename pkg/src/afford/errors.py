"""Exception types raised across the package.

Every error derives from :class:`AffordError` so callers (the CLI in
particular) can catch the whole family in one place.
"""


class AffordError(Exception):
    """Base class for all package errors."""


# geometry
class OutOfBounds(AffordError, ValueError):
    pass


class InvalidDepth(AffordError, ValueError):
    pass


class NonUnitQuaternion(AffordError, ValueError):
    pass


class DegenerateRotation(AffordError, ValueError):
    pass


# grip mapping
class DegeneratePalm(AffordError, ValueError):
    pass


class AmbiguousOrientation(AffordError, ValueError):
    pass


class NoObjectPoints(AffordError, ValueError):
    pass


class DegenerateVfp(AffordError, ValueError):
    pass


class ParallelAxes(AffordError, ValueError):
    pass


# contact extraction
class DegenerateRegion(AffordError, ValueError):
    pass


class TooFewPoints(AffordError, ValueError):
    pass


# diffusion / model
class BadParams(AffordError, ValueError):
    pass


class StepOutOfRange(AffordError, IndexError):
    pass


class DimensionMismatch(AffordError, ValueError):
    pass


class UnknownInstruction(AffordError, KeyError):
    pass


class NonFiniteLoss(AffordError, FloatingPointError):
    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class ParamIoError(AffordError, OSError):
    pass


class VersionMismatch(AffordError, ValueError):
    pass


class ShapeMismatch(AffordError, ValueError):
    pass


# data
class SpecInfeasible(AffordError, RuntimeError):
    pass


class CorruptManifest(AffordError, ValueError):
    def __init__(self, line, reason):
        super().__init__(f"manifest line {line}: {reason}")
        self.line = line
        self.reason = reason


class MissingBlob(AffordError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing blob: {path}")
        self.path = str(path)


class SizeMismatch(AffordError, ValueError):
    pass


class CurationFailed(AffordError, RuntimeError):
    def __init__(self, record_id, cause):
        super().__init__(f"curation failed for record {record_id}: {cause}")
        self.record_id = record_id
        self.cause = cause


# evaluation
class EmptyMask(AffordError, ValueError):
    pass


# configuration
class ConfigError(AffordError, ValueError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path

"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to, so the command
line can print a single ``ClassName: message`` line and exit without a table
of special cases.
"""


class SideTuneError(Exception):
    exit_code = 4


class ConfigError(SideTuneError):
    exit_code = 2


class DataError(SideTuneError):
    exit_code = 3


class ModelError(SideTuneError):
    exit_code = 4


# configuration
class EmptyConfig(ConfigError):
    pass


class NegativeCoefficient(ConfigError):
    pass


class ConstraintViolation(ConfigError):
    pass


class InvalidWidth(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


# data
class MissingRoot(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class LayoutMismatch(DataError):
    pass


class SizeMismatch(DataError):
    pass


class DegenerateImage(DataError):
    pass


class MissingToken(DataError):
    pass


class EmptyEvalSet(DataError):
    pass


class CheckpointMismatch(DataError):
    pass


# ocr
class EngineMissing(SideTuneError):
    pass


class OcrFailure(SideTuneError):
    pass


class Timeout(SideTuneError):
    pass


# model / training
class DimensionMismatch(ModelError):
    pass


class ArityMismatch(ModelError):
    pass


class ShapeError(ModelError):
    pass


class OutOfRange(ModelError):
    pass


class DivergedLoss(ModelError):
    pass


class FrozenBaseViolation(ModelError):
    pass

"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class QgnError(Exception):
    exit_code = 1


class FormatError(QgnError):
    exit_code = 1


class IoError(FormatError):
    exit_code = 1


class ClassRangeError(FormatError):
    exit_code = 1


class ShapeError(QgnError):
    exit_code = 2


class BoundsError(ShapeError):
    exit_code = 2


class StructureError(QgnError):
    exit_code = 3


class ConfigError(QgnError):
    exit_code = 4


class ModeError(ConfigError):
    exit_code = 4


class VerificationError(QgnError):
    exit_code = 5


class InputError(QgnError):
    exit_code = 6

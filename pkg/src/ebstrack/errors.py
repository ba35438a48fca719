"""Exception types shared across the package.

Every error carries a short machine-readable ``kind`` so the CLI can print a
single parseable line and pick an exit code.
"""


class EbsTrackError(Exception):
    kind = "Error"
    exit_code = 3


class ConfigError(EbsTrackError):
    kind = "ConfigError"
    exit_code = 2


class ParseError(EbsTrackError):
    kind = "ParseError"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCatalog(EbsTrackError):
    kind = "EmptyCatalog"


class PackingFailure(EbsTrackError):
    kind = "PackingFailure"


class BehindCamera(EbsTrackError):
    kind = "BehindCamera"


class InvalidStep(EbsTrackError):
    kind = "InvalidStep"


class InsufficientData(EbsTrackError):
    kind = "InsufficientData"

    def __init__(self, message, bin=None):
        self.bin = bin
        super().__init__(message)


class NoConvergence(EbsTrackError):
    kind = "NoConvergence"


class UnknownProfile(EbsTrackError):
    kind = "UnknownProfile"
    exit_code = 2


class BadMagic(EbsTrackError):
    kind = "BadMagic"


class TruncatedRecord(EbsTrackError):
    kind = "TruncatedRecord"

    def __init__(self, index):
        self.index = index
        super().__init__(f"truncated record after index {index}")


class EmptyBatch(EbsTrackError):
    kind = "EmptyBatch"


class DegenerateLikelihood(EbsTrackError):
    kind = "DegenerateLikelihood"


class TimeReversal(EbsTrackError):
    kind = "TimeReversal"


class SingularInnovation(EbsTrackError):
    kind = "SingularInnovation"


class DegenerateGeometry(EbsTrackError):
    kind = "DegenerateGeometry"


class NoSolution(EbsTrackError):
    kind = "NoSolution"
    exit_code = 4


class InitFailure(EbsTrackError):
    kind = "InitFailure"
    exit_code = 4


class NoOverlap(EbsTrackError):
    kind = "NoOverlap"

"""Exception hierarchy shared by all sedkit modules."""


class SedkitError(Exception):
    """Base class for every error raised by this package."""


class IngestError(SedkitError):
    """An audio file could not be read."""


class AudioFormatError(SedkitError):
    """An audio file has an unsupported encoding or layout."""


class ShapeError(SedkitError):
    """An array has the wrong shape for the requested operation."""


class ParameterError(SedkitError):
    """An argument is outside its documented range."""


class StateError(SedkitError):
    """An operation was applied to an object in the wrong state."""


class FileFormatError(SedkitError):
    """A binary artifact (cache, checkpoint, score file, ...) is malformed.

    Carries the offending path and the byte offset at which parsing failed
    so diagnostics stay actionable.
    """

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path} @ byte {self.offset}: {message}")


class VocabularyError(SedkitError):
    """A label file referenced a class name outside the class map."""


class LabelError(SedkitError):
    """A label row violates its format (bad interval, bad confidence, ...)."""


class MetricError(SedkitError):
    """A metric cannot be computed on the given inputs."""


class ConfigError(SedkitError):
    """A configuration file or value is invalid."""

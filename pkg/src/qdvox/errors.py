"""Exception types shared across the package."""


class QdvoxError(Exception):
    """Base class for all package errors."""


class EmptyMorphology(QdvoxError):
    """A genome decoded to a grid without any material cells."""


class NumericBlowup(QdvoxError):
    """The simulation produced non-finite coordinates or an inverted voxel."""


class DegenerateDataset(QdvoxError):
    """A distillation dataset holds fewer rows than one mini-batch."""


class ResumeMismatch(QdvoxError):
    """A checkpoint was written under a different configuration."""


class BrokenLineage(QdvoxError):
    """A parent id referenced by the event log was never recorded."""


class ConfigError(QdvoxError):
    """Invalid or unreadable run configuration."""


class CorruptLog(QdvoxError):
    """An event log could not be parsed.

    ``line`` is the 1-based number of the offending line and
    ``last_valid`` the number of the last line that parsed.
    """

    def __init__(self, path, line, last_valid):
        super().__init__(f"{path}: corrupt record at line {line} (last valid line {last_valid})")
        self.path = path
        self.line = line
        self.last_valid = last_valid

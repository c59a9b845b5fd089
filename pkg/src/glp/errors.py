"""Error taxonomy shared across the package.

Every error that should abort a CLI run derives from GlpError and carries a
process exit code, so failure categories are distinguishable by scripts.
"""


class GlpError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GlpError):
    """Invalid configuration: bad generator spec, train config, or CLI config file."""

    exit_code = 2


class MissingArtifactError(GlpError):
    """A required input artifact (weight file, cohort CSV) does not exist."""

    exit_code = 3


class SchemaError(GlpError):
    """A data file is structurally unusable (bad header, wrong column count)."""

    exit_code = 4


class IntegrityError(GlpError):
    """A weight file failed verification, or a frozen model changed under us."""

    exit_code = 5


class TrainingError(GlpError):
    """Training cannot proceed (empty frame set, single-class labels, ...)."""

    exit_code = 6


class EvaluationError(GlpError):
    """A metric is undefined for the given inputs (zero variance, one class)."""

    exit_code = 6


class EncodingError(GlpError):
    """A value cannot be encoded into the feature schema."""

    exit_code = 4

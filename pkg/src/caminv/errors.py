"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
missing upstream artifacts exit 3, numeric failures exit 4.
"""


class ConfigError(Exception):
    """Invalid configuration key, value, or combination."""


class DataError(Exception):
    """Malformed dataset contents: manifest rows, labels, PAI types."""


class MissingArtifactError(Exception):
    """A required input artifact (dataset, checkpoint, calibration) is absent."""


class CheckpointError(Exception):
    """Checkpoint file is unreadable, truncated, or from an unknown format version."""


class CalibrationError(Exception):
    """Unknown-camera calibration could not be computed from the given samples."""


class NumericError(Exception):
    """A non-finite value reached a point where training cannot continue."""

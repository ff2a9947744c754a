"""Exception types shared across the package."""


class Street2VecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(Street2VecError):
    """A configuration value violates its contract (maps to CLI exit code 2)."""


class ManifestError(Street2VecError):
    """The manifest file itself is unreadable or structurally broken."""


class PanoramaError(Street2VecError):
    """A panorama could not be assembled; carries the offending pano_id."""

    def __init__(self, pano_id: str, message: str):
        super().__init__(f"{pano_id}: {message}")
        self.pano_id = pano_id


class CheckpointError(Street2VecError):
    """A checkpoint file is missing, truncated, or version-incompatible."""


class TrainingDivergedError(Street2VecError):
    """The loss became non-finite; carries step diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AnalyticsError(Street2VecError):
    """Invalid statistical or geometric input (empty group, bad ring, ...)."""

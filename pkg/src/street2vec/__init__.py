"""Self-supervised change detection for temporal street-level panoramas.

The package covers the full desk-scale pipeline: a synthetic panorama
corpus with ground-truth change classes, a convolutional encoder trained
with a redundancy-reduction objective on same-location/different-year
pairs, cosine-distance change maps, and the area/zone/class statistics
used to evaluate them. See the ``street2vec`` command line entry point
for end-to-end runs.
"""

__version__ = "0.1.0"

from .errors import (
    AnalyticsError,
    CheckpointError,
    ConfigError,
    ManifestError,
    PanoramaError,
    Street2VecError,
    TrainingDivergedError,
)

__all__ = [
    "AnalyticsError",
    "CheckpointError",
    "ConfigError",
    "ManifestError",
    "PanoramaError",
    "Street2VecError",
    "TrainingDivergedError",
    "__version__",
]

"""Non-intrusive speech quality prediction toolkit.

Trains MOS predictors under scarce annotations by transferring features
learned on a large synthetic degraded corpus, either from a supervised
degradation classifier or from deep convolutional embedded clustering,
and evaluates them under speaker-independent cross-validation.
"""

from nimos.corpus import AudioClip, Manifest, ManifestEntry, SplitPlan

__version__ = "0.1.0"

__all__ = ["AudioClip", "Manifest", "ManifestEntry", "SplitPlan", "__version__"]

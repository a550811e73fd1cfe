"""Cross-talk reduction for close-talk and far-field meeting recordings.

Submodules: ``stft``, ``core``, ``fcp``, ``losses``, ``solver``,
``simulator``, ``pseudolabel``, ``pipeline``, ``metrics``, ``io``, ``cli``.
"""

from .core import (ActivityTimeline, FilterBank, GroundTruth, HyperParams, MixtureSet,
                   TapWindow, Waveforms)
from .stft import CLOSE_TALK_STFT, FAR_FIELD_STFT, StftConfig, istft, stft

__version__ = "0.1.0"

__all__ = [
    "ActivityTimeline", "FilterBank", "GroundTruth", "HyperParams", "MixtureSet", "TapWindow",
    "Waveforms", "CLOSE_TALK_STFT", "FAR_FIELD_STFT", "StftConfig", "istft", "stft",
]

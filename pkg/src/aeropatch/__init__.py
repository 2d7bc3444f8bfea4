"""Adversarial patch optimization and evaluation for overhead car detectors."""

__version__ = "0.1.0"

from .types import (  # noqa: F401
    Detection,
    DetectionSet,
    Patch,
    PatchDesign,
    PrintableColorSet,
    SceneDataset,
    TrackedScoreSeries,
)

"""Deconfounded cross-modal matching for video moment retrieval at desk scale."""

__version__ = "0.1.0"

from .grid import MomentGrid, TemporalInterval, enumerate_candidates, iou, scaled_labels  # noqa: F401
from .data import (BiasSpec, DatasetSplit, GenerateConfig, VideoSample,  # noqa: F401
                   generate_dataset, load_annotations, sample_biased_location)

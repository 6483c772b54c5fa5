"""Progressive video summarization with multimodal self-supervised pretraining."""

from . import dataprep, encoders, metrics, pretrain, progressive, segmentation, tensorkit
from .errors import SpvsError

__version__ = "0.1.0"

__all__ = [
    "SpvsError",
    "dataprep",
    "encoders",
    "metrics",
    "pretrain",
    "progressive",
    "segmentation",
    "tensorkit",
]

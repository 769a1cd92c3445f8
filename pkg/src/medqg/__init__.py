"""Medical QA data pipeline: corpus segmentation, case generation, evaluation and export."""

__version__ = "0.1.0"

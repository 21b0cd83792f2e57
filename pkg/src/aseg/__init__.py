"""Attention-augmented residual U-Net for binary medical image segmentation."""

__version__ = "0.1.0"

from aseg.estimator import ResUNetSegmenter

__all__ = ["ResUNetSegmenter", "__version__"]

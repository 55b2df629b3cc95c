"""Few-shot unsupervised domain adaptation for optic disc and cup segmentation."""

__version__ = "0.1.0"

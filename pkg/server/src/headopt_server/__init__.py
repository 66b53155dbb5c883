"""Reference wire-protocol server: guidance gradients, decoding, segmentation."""

__version__ = "0.1.0"

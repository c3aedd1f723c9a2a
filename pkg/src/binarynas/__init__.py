"""Hardware-aware architecture search with binarized path gates."""

__version__ = "0.1.0"

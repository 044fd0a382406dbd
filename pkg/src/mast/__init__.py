"""Training sparsification-robust models by minimizing the expected loss of sketched weights."""

__version__ = "0.1.0"

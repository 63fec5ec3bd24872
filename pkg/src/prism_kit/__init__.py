"""Multi-sequence MRI pretraining with disentangled anatomical and
sequence-specific features, downstream adapters, and an evaluation harness."""

__version__ = "0.1.0"

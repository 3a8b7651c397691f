"""Multi-task DNN watermarking with keyed verification and a notarized ownership log."""

__version__ = "0.1.0"

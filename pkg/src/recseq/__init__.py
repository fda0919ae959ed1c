"""Recurrent sequence modeling over visual features.

A small, self-contained toolkit for recurrent networks on sequential data:
RNN and LSTM cells with exact manual backpropagation, task heads for
sequence classification, caption generation and sequence-to-sequence
transduction, plain SGD training, greedy/beam/temperature decoding, and
evaluation utilities (BLEU, retrieval, clip-level protocols). Everything is
built on float64 numpy arrays and is deterministic under a fixed seed.
"""

from .errors import DataFormatError, NumericError, UsageError

__version__ = "0.1.0"

__all__ = ["DataFormatError", "NumericError", "UsageError", "__version__"]

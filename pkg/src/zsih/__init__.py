"""Cross-modal sketch-image hashing with graph-convolutional code learning
and Hamming-space zero-shot retrieval."""

__version__ = "0.1.0"

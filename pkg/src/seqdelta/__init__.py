"""Sequence place descriptors from frame embeddings: temporal differencing,
a single-step LSTM with residual fusion, quadruplet training and
coarse-to-fine retrieval."""

__version__ = "0.1.0"

"""Seq2seq toolkit with structure-quantized embeddings and invariant attention."""

__version__ = "0.1.0"

"""DAM-GT: graph Transformer with dual positional encoding and mask-aware attention."""

__version__ = "0.1.0"

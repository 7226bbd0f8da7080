"""Attention-based end-to-end speech recognition on a small numpy autograd."""

__version__ = "0.1.0"

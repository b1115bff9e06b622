"""Hybrid data-model parallel training of attention-based LSTM translation models."""

__version__ = "0.1.0"

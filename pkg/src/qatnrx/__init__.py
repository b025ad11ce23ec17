"""Quantization-aware training of convolutional neural OFDM receivers."""

__version__ = "0.1.0"

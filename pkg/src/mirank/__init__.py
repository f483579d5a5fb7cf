"""Squeeze-and-excitation EEGNet for binary motor-imagery direction decoding."""

__version__ = "0.1.0"

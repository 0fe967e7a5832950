"""Quantization-friendly depthwise-separable networks: float and int8 engines,
post-training calibration, diagnostics and latency scoring, all on numpy."""

__version__ = "0.1.0"

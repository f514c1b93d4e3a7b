"""One-shot texture segmentation with directional encoders and self-gated relation metrics."""

__version__ = "0.1.0"

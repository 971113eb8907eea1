"""Integer-only power-of-two quantization toolkit for event-camera CNNs."""

__version__ = "0.1.0"

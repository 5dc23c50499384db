"""Self-supervised feature learning for accelerated cine MRI reconstruction."""

__version__ = "0.1.0"

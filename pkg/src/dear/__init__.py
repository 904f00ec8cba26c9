"""Deep-learning audio watermarking robust to acoustic re-recording."""

__version__ = "0.1.0"

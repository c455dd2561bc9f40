"""Rate-distortion training and export of multi-resolution hash-grid fields."""

__version__ = "0.1.0"

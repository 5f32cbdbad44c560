"""emphyseg: scanner-robust emphysema segmentation on synthetic CT phantoms."""

__version__ = "0.1.0"

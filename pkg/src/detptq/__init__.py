"""Post-training quantization of a toy object detector with an ODOL-selected Lp metric."""

__version__ = "0.1.0"

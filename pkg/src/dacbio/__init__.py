"""Skull and cerebellum segmentation with domain and consistency calibration for HC/TCD biometry."""

__version__ = "0.1.0"

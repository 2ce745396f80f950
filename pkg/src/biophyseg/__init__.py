"""Biophysics-regularised brain-tumour segmentation on synthetic 3-D volumes."""

__version__ = "0.1.0"

"""Convolution-deconvolution single-shot detector on a small numpy tensor library."""

__version__ = "0.1.0"

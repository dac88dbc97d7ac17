"""Tool segmentation from unpaired images and error-laden annotations."""

__version__ = "0.1.0"

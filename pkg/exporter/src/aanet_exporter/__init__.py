"""Image-to-AAFM feature export for the aanet retrieval engine."""

from .export import ExportJob, ExportReport, encode_image, export

__version__ = "0.1.0"

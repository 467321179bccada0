"""Parse-and-recall lung nodule malignancy model on a small numpy autodiff engine."""

__version__ = "0.1.0"

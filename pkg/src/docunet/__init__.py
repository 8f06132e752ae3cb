"""Document-level relation extraction as segmentation over an entity-pair
matrix, built on a self-contained reverse-mode autodiff engine."""

__version__ = "0.1.0"

"""Aligned recurrent transfer (ART) for cross-domain sequence models, in numpy."""

__version__ = "0.1.0"

"""Early-exit multi-exit policies for language-conditioned control."""
__version__ = "0.1.0"

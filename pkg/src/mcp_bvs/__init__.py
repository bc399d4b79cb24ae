"""BVS two-stage masked generative token pipeline."""

__version__ = "0.1.0"

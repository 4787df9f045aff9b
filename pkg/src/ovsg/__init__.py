"""Open-vocabulary scene graph generation on numpy."""

__version__ = "0.1.0"

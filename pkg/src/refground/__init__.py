"""Single-stage referring-expression grounding on a small trainable network."""

__version__ = "0.1.0"

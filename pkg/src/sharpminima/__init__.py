"""Small-batch vs large-batch training and sharpness of the minimizers they reach."""

__version__ = "0.1.0"

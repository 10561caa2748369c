"""Dynamic CoT keyphrase-prediction laboratory."""

__version__ = "0.1.0"

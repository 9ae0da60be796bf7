"""Attention-based multiple-instance learning for slide-level prediction
from annotated biopsy regions and clinical data, with the evaluation and
interpretability tooling around it."""

__version__ = "0.1.0"

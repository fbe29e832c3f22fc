"""Pretraining and finetuning of a graph-aware text encoder on text-rich networks."""

__version__ = "0.1.0"

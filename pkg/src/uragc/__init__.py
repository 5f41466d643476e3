"""Conformal uncertainty harness for retrieval-augmented multiple-choice QA."""

__version__ = "0.1.0"

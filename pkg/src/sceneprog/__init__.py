"""Compositional VQA on synthetic scenes: programs, interpreters, learners."""

__version__ = "0.1.0"

"""Patch-based lung carcinoma detection on whole-slide images."""

__version__ = "0.1.0"

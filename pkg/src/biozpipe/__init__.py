"""Desk-scale bioimpedance tissue-classification pipeline."""

__version__ = "0.1.0"

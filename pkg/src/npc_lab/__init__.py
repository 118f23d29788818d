"""Desk-scale dense retrieval with mismatched-pair detection and EMA-teacher correction."""

__version__ = "0.1.0"

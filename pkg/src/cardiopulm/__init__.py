"""Explainable cardiopulmonary risk pipeline for chest CT volumes."""

__version__ = "0.1.0"

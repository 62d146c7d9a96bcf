"""Phenotype extraction, standardization, and prioritization from clinical notes."""

__version__ = "0.1.0"

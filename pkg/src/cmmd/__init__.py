"""Conditional multi-modal discriminative model (CMMD) with posterior-collapse diagnostics."""

__version__ = "0.1.0"

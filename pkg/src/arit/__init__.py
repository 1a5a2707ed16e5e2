"""Artifact-resilient two-stage image translation for endoscopy-like imagery."""

__version__ = "0.1.0"

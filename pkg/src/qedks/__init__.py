"""Kohn-Sham construction for lattice QED on finite, exactly solvable models."""

__version__ = "0.1.0"

from .model import ExternalDrive, Model, ModelSpec, Series, build_model  # noqa: F401

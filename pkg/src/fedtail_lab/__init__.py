"""Federated domain generalisation with sharpness-aware, class-aware objectives on small MLPs."""

__version__ = "0.1.0"

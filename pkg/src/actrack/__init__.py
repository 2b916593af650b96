"""Frozen-encoder visual object tracking with an additive siamese conditioning net."""

__version__ = "0.1.0"

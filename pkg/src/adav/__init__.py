"""Temporal-consistency defense against object-vanishing patches, at desk scale."""

__version__ = "0.1.0"

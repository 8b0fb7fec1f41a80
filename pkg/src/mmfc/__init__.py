"""Learned multimodal feature compression for machine tasks, at desk scale."""

__version__ = "0.1.0"

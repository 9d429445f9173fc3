"""Multimodal rating prediction robust to missing modalities."""

__version__ = "0.1.0"

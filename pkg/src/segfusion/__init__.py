"""Segmentation-assisted multimodal projector fusion at desk scale."""

__version__ = "0.1.0"

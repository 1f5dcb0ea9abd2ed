"""Occlusion-based evaluation of CAM explainers, including diffusion inpainting."""

__version__ = "0.1.0"

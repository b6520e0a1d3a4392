"""Tri-branch video forgery detector: RGB, texture and frequency streams
fused over time with attention, trained with focal loss and progressive
unfreezing, inspected with Grad-CAM."""

__version__ = "0.1.0"

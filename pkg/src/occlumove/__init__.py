"""occlumove: move occluded objects inside real images with guided diffusion."""

__version__ = "0.1.0"

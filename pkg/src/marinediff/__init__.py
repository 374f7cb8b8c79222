"""Object-focused conditional diffusion for marine saliency segmentation."""

__version__ = "0.1.0"

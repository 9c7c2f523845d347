"""Semi-supervised 3D segmentation with a cross-attention mean teacher,
uncertainty-weighted consistency and sharpness-aware optimisation."""

__version__ = "0.1.0"

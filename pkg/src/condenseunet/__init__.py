"""CondenseUNet: learned group convolution with condensation pruning in a U-shaped segmentation network."""

__version__ = "0.1.0"

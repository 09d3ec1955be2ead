"""SLCA-UNet: stacked-convolution, layered/channel-attention UNet for tumor segmentation."""

__version__ = "0.1.0"

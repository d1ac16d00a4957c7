"""Semi-supervised conditional GAN training with a label-space triplet matching pretext task."""

__version__ = "0.1.0"

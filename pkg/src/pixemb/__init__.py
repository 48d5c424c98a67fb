"""Pixel embedding for fully quantized convolutional networks.

Training runs on a small float32 autodiff tape with straight-through
quantizers; inference runs on bit-packed codes and popcount convolutions.
"""

__version__ = "0.1.0"

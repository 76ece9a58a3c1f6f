"""Desk-scale learnable camera ISP toolkit.

RAW mosaics in, display sRGB out: parametric color mapping fitted per
image pair, flow-consistency masking for misaligned supervision, and small
restoration / color-prediction networks running on a from-scratch tape
gradient engine.
"""

__version__ = "0.1.0"

"""Coarse-to-fine image forgery localization.

From-scratch tensor engine with reverse-mode autodiff, channel-wise high-pass
noise features, dual (spatial + channel) forgery attention, a two-stage
encoder/decoder localization network, self-adversarial training, synthetic
forgery generation, and pixel-level evaluation.
"""

__version__ = "0.1.0"

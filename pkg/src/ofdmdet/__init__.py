"""Deep-unfolded OFDM detection under doubly-selective fading."""

__version__ = "0.1.0"

"""Distributional value factorisation for cooperative multi-agent RL with MMD-trained particle mixers."""

__version__ = "0.1.0"

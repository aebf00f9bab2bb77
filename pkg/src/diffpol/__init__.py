"""Diffusion-policy imitation learning with adaptive training and
stage-scheduled inference, plus a toy push benchmark to measure both."""

__version__ = "0.1.0"

"""Toy-scale story visualization and continuation diffusion on a numpy autodiff engine."""

__version__ = "0.1.0"

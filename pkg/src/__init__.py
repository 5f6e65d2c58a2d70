"""
Physics-guided directional relighting.

Synthetic OLAT rendering, photometric stereo, a differentiable image
formation model and a two-stage generator trained with a small
reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
__author__ = "Relighting Contributors"
__description__ = "Physics-guided directional relighting"

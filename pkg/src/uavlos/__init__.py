"""Sensing-assisted LoS/NLoS identification for UAV-to-ground positioning.

Modules: ``scene`` (urban geometry), ``channel`` (ray-traced labels, CIR, ToA),
``sensing`` (nadir camera), ``dataset`` (aligned samples, SNLD files),
``tensor`` (reverse-mode autodiff), ``model`` (fusion network and baselines),
``positioning`` (ToA trilateration), ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"

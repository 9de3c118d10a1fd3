"""Continuous-space electromagnetic channel toolkit.

Spherical-wave radiation operators between a source ball and a receive ball,
optimised multi-user source currents, PEC-sphere scattering by point-matched
method of moments, and channel statistics / capacities on top of them.
"""

from __future__ import annotations

__version__ = "0.1.0"

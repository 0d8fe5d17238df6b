"""Hybrid coefficient imaging on a disk.

Forward synthesis of localized-perturbation probe data, algebraic recovery
of interior energy densities, and alternating perturbative reconstruction of
the conductivity and permittivity maps.
"""

__version__ = "0.1.0"

from . import cli, diagnostics, disentangle, fem, forward, mesh, reconstruct  # noqa: F401

"""polywave: Monte Carlo laboratory for random-source polyharmonic waves.

Simulates (-Delta)^n u - k^(2n) u + q u = sqrt(sigma) dW with outgoing
radiation, estimates boundary-trace correlations over noise realizations,
and reconstructs the source strength sigma from probe functionals built on
plane-wave pairs (q = 0) or complex-geometric-optics pairs (q != 0).
"""

__version__ = "0.1.0"

from .kernel import ModelParams, RootSet, SingularPointError, split_roots
from .fields import (
    VolumeGrid, StrengthField, PotentialField, NoiseRealization,
    make_grid, sample_strength, sample_potential, zero_potential,
    sample_white_noise, volume_pairing,
)
from .direct import (
    SphereQuadrature, BoundaryTrace, BoundaryTraceBatch, DirectSolver,
    SolverDivergenceError, build_sphere_quadrature, solve_direct,
)

__all__ = [
    "ModelParams", "RootSet", "SingularPointError", "split_roots",
    "VolumeGrid", "StrengthField", "PotentialField", "NoiseRealization",
    "make_grid", "sample_strength", "sample_potential", "zero_potential",
    "sample_white_noise", "volume_pairing",
    "SphereQuadrature", "BoundaryTrace", "BoundaryTraceBatch", "DirectSolver",
    "SolverDivergenceError", "build_sphere_quadrature", "solve_direct",
]

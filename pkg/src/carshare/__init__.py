"""Mean-field models of a car-sharing network with parking reservations."""

from .core import (
    DEFAULT_TOL,
    INFINITE,
    JointDist,
    MarginalDist,
    Model,
    ModelParams,
    Tolerances,
    TruncationGrid,
    dist_distance,
    model1_grid,
    total_mass,
)
from .equilibrium import EquilibriumSolution, beta_model1, beta_model2, delta_bar, solve
from .meanfield import Trajectory, functional_residual, initial_dist, integrate

__all__ = [
    "DEFAULT_TOL",
    "INFINITE",
    "JointDist",
    "MarginalDist",
    "Model",
    "ModelParams",
    "Tolerances",
    "TruncationGrid",
    "dist_distance",
    "model1_grid",
    "total_mass",
    "EquilibriumSolution",
    "beta_model1",
    "beta_model2",
    "delta_bar",
    "solve",
    "Trajectory",
    "functional_residual",
    "initial_dist",
    "integrate",
]

"""Parameter records, truncation grids and distributions on the (j, k) lattice.

``j`` counts reservations (cars travelling towards a station) and ``k`` counts
cars parked at the station. Every other module exchanges these objects.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

INFINITE = math.inf


class Model(enum.Enum):
    RESERVATION_INFINITE = "model1"
    NO_RESERVATION_FINITE = "model2"
    RESERVATION_FINITE = "model3"

    @classmethod
    def parse(cls, value: "Model | str | int") -> "Model":
        if isinstance(value, Model):
            return value
        aliases = {
            "1": cls.RESERVATION_INFINITE,
            "2": cls.NO_RESERVATION_FINITE,
            "3": cls.RESERVATION_FINITE,
        }
        key = str(value).lower().removeprefix("model")
        if key in aliases:
            return aliases[key]
        for m in cls:
            if m.name.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown model {value!r}")


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by the solvers and the test-suite."""

    mass_tol: float = 1e-9
    fixed_point_tol: float = 1e-12
    ode_rel_tol: float = 1e-8
    ode_abs_tol: float = 1e-14
    prob_tol: float = 1e-9


DEFAULT_TOL = Tolerances()


@dataclass(frozen=True)
class ModelParams:
    """Homogeneous station-network parameters.

    ``lam`` is the rate at which a parked car is picked up, ``mu`` the inverse
    mean travel time, ``fleet_density`` the number of cars per station and
    ``capacity`` the number of slots per station (``INFINITE`` for Model 1).
    """

    lam: float
    mu: float
    fleet_density: float
    capacity: float = INFINITE
    model: Model = Model.RESERVATION_INFINITE

    def __post_init__(self):
        object.__setattr__(self, "model", Model.parse(self.model))
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.fleet_density >= 0:
            raise ValueError(f"fleet density must be non-negative, got {self.fleet_density}")
        if self.model is Model.RESERVATION_INFINITE:
            if self.capacity != INFINITE:
                raise ValueError("Model 1 requires infinite capacity")
        else:
            if self.capacity == INFINITE or self.capacity != int(self.capacity) or self.capacity < 1:
                raise ValueError(f"{self.model.value} requires a finite positive integer capacity")
            object.__setattr__(self, "capacity", int(self.capacity))
            if self.fleet_density > self.capacity:
                raise ValueError(
                    f"fleet density {self.fleet_density} exceeds capacity {self.capacity}"
                )

    @property
    def rho(self) -> float:
        return self.lam / self.mu

    @property
    def finite(self) -> bool:
        return self.capacity != INFINITE


@dataclass(frozen=True)
class TruncationGrid:
    """Index box ``0..j_max`` x ``0..k_max``, optionally cut to ``j + k <= joint_cap``."""

    j_max: int
    k_max: int
    joint_cap: int | None = None

    def __post_init__(self):
        if self.j_max < 0 or self.k_max < 0:
            raise ValueError("grid cutoffs must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.j_max + 1, self.k_max + 1)

    def mask(self) -> np.ndarray:
        """Boolean array of admissible cells."""
        j, k = np.indices(self.shape)
        if self.joint_cap is None:
            return np.ones(self.shape, dtype=bool)
        return j + k <= self.joint_cap

    @classmethod
    def for_capacity(cls, K: int) -> "TruncationGrid":
        return cls(K, K, K)

    @classmethod
    def for_params(cls, params: ModelParams, tail: float = 1e-12) -> "TruncationGrid":
        if params.finite:
            return cls.for_capacity(params.capacity)
        return model1_grid(params, tail=tail)


def model1_grid(params: ModelParams, tail: float = 1e-12, extra_mass: float | None = None) -> TruncationGrid:
    """Default Model 1 grid.

    The equilibrium is Poisson(rho*beta) x Geometric(beta), so the reservation
    cutoff follows the Poisson spread and the car cutoff ``beta**k_max < tail``.
    ``extra_mass`` widens both axes for transients started far from equilibrium
    (e.g. all ``U`` particles as reservations).
    """
    from .equilibrium import beta_model1

    rho = params.rho
    beta = beta_model1(params)
    j_max = math.ceil(rho + 10.0 * math.sqrt(rho))
    if beta > 0:
        k_max = math.ceil(math.log(tail) / math.log(beta))
    else:
        k_max = 1
    m = params.fleet_density if extra_mass is None else extra_mass
    if m > 0:
        spread = math.ceil(m + 10.0 * math.sqrt(m) + 10)
        j_max = max(j_max, spread)
        k_max = max(k_max, spread)
    return TruncationGrid(max(j_max, 1), max(k_max, 1))


def _check_mass(mass: np.ndarray, tol: float) -> None:
    if np.any(mass < -tol):
        raise ValueError(f"negative probability {mass.min():.3e}")
    total = float(mass.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"distribution sums to {total!r}, not 1")


@dataclass(frozen=True, eq=False)
class JointDist:
    """Probability mass ``alpha[j, k]`` on a :class:`TruncationGrid`."""

    grid: TruncationGrid
    mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float)
        if mass.shape != self.grid.shape:
            raise ValueError(f"mass shape {mass.shape} does not match grid {self.grid.shape}")
        if self.grid.joint_cap is not None and np.any(mass[~self.grid.mask()] != 0):
            raise ValueError("mass outside j + k <= K")
        _check_mass(mass, DEFAULT_TOL.prob_tol)
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def normalized(cls, grid: TruncationGrid, mass) -> "JointDist":
        mass = np.clip(np.asarray(mass, dtype=float), 0.0, None)
        if grid.joint_cap is not None:
            mass = np.where(grid.mask(), mass, 0.0)
        return cls(grid, mass / mass.sum())

    @classmethod
    def point(cls, grid: TruncationGrid, j: int, k: int) -> "JointDist":
        mass = np.zeros(grid.shape)
        mass[j, k] = 1.0
        return cls(grid, mass)

    @classmethod
    def product(cls, grid: TruncationGrid, pj, pk) -> "JointDist":
        """Independent reservations/cars with the given marginals (cut to the grid)."""
        pj = np.asarray(pj, dtype=float)[: grid.j_max + 1]
        pk = np.asarray(pk, dtype=float)[: grid.k_max + 1]
        mass = np.zeros(grid.shape)
        mass[: len(pj), : len(pk)] = np.outer(pj, pk)
        return cls.normalized(grid, mass)

    def marginal_reservations(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def marginal_cars(self) -> np.ndarray:
        return self.mass.sum(axis=0)

    def regrid(self, grid: TruncationGrid) -> "JointDist":
        """Copy onto a (larger) grid, dropping cells that fall outside."""
        mass = np.zeros(grid.shape)
        nj = min(grid.j_max, self.grid.j_max) + 1
        nk = min(grid.k_max, self.grid.k_max) + 1
        mass[:nj, :nk] = self.mass[:nj, :nk]
        return JointDist.normalized(grid, mass)


@dataclass(frozen=True, eq=False)
class MarginalDist:
    """Distribution of the number of parked cars on ``0..K`` (Model 2)."""

    mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float)
        if mass.ndim != 1 or mass.size == 0:
            raise ValueError("marginal mass must be a non-empty vector")
        _check_mass(mass, DEFAULT_TOL.prob_tol)
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @property
    def size(self) -> int:
        return self.mass.size

    @property
    def K(self) -> int:
        return self.mass.size - 1

    @classmethod
    def normalized(cls, mass) -> "MarginalDist":
        mass = np.clip(np.asarray(mass, dtype=float), 0.0, None)
        return cls(mass / mass.sum())

    @classmethod
    def point(cls, K: int, j: int) -> "MarginalDist":
        mass = np.zeros(K + 1)
        mass[j] = 1.0
        return cls(mass)

    def mean(self) -> float:
        return float(np.arange(self.size) @ self.mass)


def total_mass(dist: JointDist) -> float:
    """Mean number of particles (reservations plus cars) per station."""
    j, k = np.indices(dist.grid.shape)
    return float(((j + k) * dist.mass).sum())


def dist_distance(a, b) -> float:
    """L1 distance (twice the total variation) between two distributions."""
    if isinstance(a, JointDist) and isinstance(b, JointDist):
        if a.grid != b.grid:
            raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    elif isinstance(a, MarginalDist) and isinstance(b, MarginalDist):
        if a.size != b.size:
            raise ValueError("support size mismatch")
    else:
        raise TypeError("both arguments must be JointDist or both MarginalDist")
    return float(np.abs(a.mass - b.mass).sum())

"""Mean-field (nonlinear forward Kolmogorov) dynamics of a typical station.

The right-hand sides recompute the self-consistent functionals ``b``, ``a``,
``c``, ``d`` from the current state, so the systems are genuinely nonlinear.
Model 1 lives on an infinite lattice; it is truncated to a box whose upward
moves are blocked at the edges, which keeps total probability exact and
turns truncation error into an observable drift of the particle mass.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .core import (
    DEFAULT_TOL,
    JointDist,
    MarginalDist,
    Model,
    ModelParams,
    Tolerances,
    TruncationGrid,
    model1_grid,
    total_mass,
)
from .equilibrium import generating_function, geometric_pmf, poisson_pmf

log = logging.getLogger(__name__)


class MassConservationError(RuntimeError):
    pass


class InvalidStateError(ValueError):
    pass


# ---------------------------------------------------------------- right-hand sides


def _rhs1(alpha: np.ndarray, lam: float, mu: float) -> np.ndarray:
    J, Kc = alpha.shape[0] - 1, alpha.shape[1] - 1
    j = np.arange(J + 1)[:, None]
    b = 1.0 - alpha[:, 0].sum()
    up_j = np.where(j < J, lam * b, 0.0)  # new reservation
    serve = mu * j * np.ones((1, Kc + 1))  # reservation becomes a parked car
    serve[:, Kc] = 0.0
    out = np.zeros_like(alpha)
    out -= up_j * alpha + serve * alpha
    out[:, 1:] -= lam * alpha[:, 1:]  # a parked car leaves
    out[1:, :] += up_j[:-1] * alpha[:-1, :]
    out[:-1, 1:] += serve[1:, :-1] * alpha[1:, :-1]
    out[:, :-1] += lam * alpha[:, 1:]
    return out


def _rhs2(alpha: np.ndarray, lam: float, mu: float, U: float) -> np.ndarray:
    K = alpha.size - 1
    a = float(np.arange(K + 1) @ alpha)
    arrival = mu * (U - a)
    out = np.zeros_like(alpha)
    out[1:] -= lam * alpha[1:]
    out[:-1] -= arrival * alpha[:-1]
    out[1:] += arrival * alpha[:-1]
    out[:-1] += lam * alpha[1:]
    return out


def _rhs3(alpha: np.ndarray, lam: float, mu: float, mask: np.ndarray, below: np.ndarray) -> np.ndarray:
    K = alpha.shape[0] - 1
    j = np.arange(K + 1)[:, None]
    d = 1.0 - alpha[:, 0].sum()
    c = 1.0 - np.fliplr(alpha).trace()
    out = np.zeros_like(alpha)
    out -= (lam * d * below + mu * j) * alpha
    out[:, 1:] -= lam * c * alpha[:, 1:]
    out[1:, :] += lam * d * alpha[:-1, :] * below[:-1, :]
    out[:-1, 1:] += mu * j[1:] * alpha[1:, :-1]
    out[:, :-1] += lam * c * alpha[:, 1:] * below[:, :-1]
    return np.where(mask, out, 0.0)


def rhs_model1(state: JointDist, params: ModelParams) -> np.ndarray:
    """Time derivative of a Model 1 state (edges of the box are reflecting)."""
    return _rhs1(state.mass, params.lam, params.mu)


def rhs_model2(state: MarginalDist, params: ModelParams) -> np.ndarray:
    a = state.mean()
    if a > params.fleet_density + DEFAULT_TOL.mass_tol:
        raise InvalidStateError(f"mean parked cars {a} exceeds fleet density {params.fleet_density}")
    return _rhs2(state.mass, params.lam, params.mu, params.fleet_density)


def rhs_model3(state: JointDist, params: ModelParams) -> np.ndarray:
    grid = state.grid
    j, k = np.indices(grid.shape)
    return _rhs3(state.mass, params.lam, params.mu, j + k <= params.capacity, j + k < params.capacity)


# ---------------------------------------------------------------- functionals


def functionals(state, params: ModelParams) -> dict:
    """Scalar summaries of a state; which ones exist depends on the model."""
    if params.model is Model.NO_RESERVATION_FINITE:
        a = state.mean()
        return {"a": a, "arrival_rate": params.mu * (params.fleet_density - a)}
    mass = state.mass
    r = float(state.marginal_reservations() @ np.arange(mass.shape[0]))
    out = {"b": 1.0 - float(mass[:, 0].sum()), "r": r, "delta": params.mu * r}
    if params.model is Model.RESERVATION_FINITE:
        out["d"] = out["b"]
        out["c"] = 1.0 - float(np.fliplr(mass).trace())
    return out


# ---------------------------------------------------------------- initial conditions

INIT_KINDS = ("AllReserved", "AllCars", "Uniform", "Geometric", "Mixed")


def _two_point(m: float, size: int) -> np.ndarray:
    """Law on the two integers around ``m`` with mean ``m``."""
    lo = int(math.floor(m))
    out = np.zeros(size)
    frac = m - lo
    out[lo] = 1.0 - frac
    if frac > 0:
        out[lo + 1] = frac
    return out


def initial_dist(kind: str, params: ModelParams, grid: TruncationGrid | None = None):
    """Mean-field analog of the particle initial states, with mass ``U``.

    ``AllReserved`` is Poisson(U) reservations and no cars (particles dropped
    uniformly at random); ``AllCars`` the same with cars. ``Uniform`` puts the
    same load on every station. ``Geometric`` has Geometric cars of mean
    ``U``; ``Mixed`` splits the mass evenly between Poisson reservations and
    Poisson cars. Finite-capacity models only know ``AllReserved`` (Model 3),
    ``AllCars`` and ``Uniform``, all as the two-point law around ``U``.
    """
    U = params.fleet_density
    if params.model is Model.NO_RESERVATION_FINITE:
        if kind not in ("AllCars", "Uniform"):
            raise ValueError(f"Model 2 supports AllCars and Uniform, not {kind!r}")
        return MarginalDist(_two_point(U, params.capacity + 1))
    if params.model is Model.RESERVATION_FINITE:
        grid = TruncationGrid.for_capacity(params.capacity)
        law = _two_point(U, params.capacity + 1)
        zero = np.eye(1, params.capacity + 1)[0]
        if kind == "AllReserved":
            return JointDist.product(grid, law, zero)
        if kind in ("AllCars", "Uniform"):
            return JointDist.product(grid, zero, law)
        raise ValueError(f"Model 3 supports AllReserved, AllCars and Uniform, not {kind!r}")
    if grid is None:
        grid = model1_grid(params, extra_mass=2 * U + 5)
        if kind == "Geometric" and U > 0:
            tail = math.ceil(math.log(1e-15) / math.log(U / (1.0 + U)))
            grid = TruncationGrid(grid.j_max, max(grid.k_max, tail))
    n = max(grid.j_max, grid.k_max) + 1
    zero = np.eye(1, n)[0]
    if kind == "AllReserved":
        return JointDist.product(grid, poisson_pmf(U, n - 1), zero)
    if kind == "AllCars":
        return JointDist.product(grid, zero, poisson_pmf(U, n - 1))
    if kind == "Uniform":
        return JointDist.product(grid, zero, _two_point(U, n))
    if kind == "Geometric":
        return JointDist.product(grid, zero, geometric_pmf(U / (1.0 + U), n - 1))
    if kind == "Mixed":
        return JointDist.product(grid, poisson_pmf(U / 2, n - 1), poisson_pmf(U / 2, n - 1))
    raise ValueError(f"unknown initial condition {kind!r}; expected one of {INIT_KINDS}")


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: list = field(repr=False)
    functionals: dict = field(repr=False)
    params: ModelParams
    mass_drift: float = 0.0
    renormalizations: int = 0

    def __len__(self):
        return len(self.states)

    def series(self, name: str) -> np.ndarray:
        return np.asarray(self.functionals[name])

    @property
    def final(self):
        return self.states[-1]

    def to_csv(self, path) -> None:
        """Long format ``t, j, k, alpha`` (``k`` empty for Model 2)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "j", "k", "alpha"])
            for t, s in zip(self.times, self.states):
                if isinstance(s, MarginalDist):
                    for j, a in enumerate(s.mass):
                        if a > 0:
                            w.writerow([repr(float(t)), j, "", repr(float(a))])
                else:
                    for (j, k), a in np.ndenumerate(s.mass):
                        if a > 0:
                            w.writerow([repr(float(t)), j, k, repr(float(a))])

    def functionals_json(self) -> dict:
        out = {"t": [float(t) for t in self.times]}
        for name in ("b", "a", "c", "d", "r", "delta"):
            if name in self.functionals:
                out[name] = [float(v) for v in self.functionals[name]]
        return out

    def dump_functionals(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.functionals_json(), fh, indent=1, sort_keys=True)


def _wrap(params: ModelParams, grid, vec):
    if params.model is Model.NO_RESERVATION_FINITE:
        return MarginalDist.normalized(vec)
    return JointDist.normalized(grid, vec.reshape(grid.shape))


def _solve(init, t_grid, params, tol: Tolerances, method):
    lam, mu = params.lam, params.mu
    if params.model is Model.RESERVATION_INFINITE:
        shape = init.grid.shape
        fun = lambda t, y: _rhs1(y.reshape(shape), lam, mu).ravel()
        y0 = init.mass.ravel()
    elif params.model is Model.NO_RESERVATION_FINITE:
        U = params.fleet_density
        fun = lambda t, y: _rhs2(y, lam, mu, U)
        y0 = init.mass.copy()
    else:
        shape = init.grid.shape
        j, k = np.indices(shape)
        mask, below = j + k <= params.capacity, j + k < params.capacity
        fun = lambda t, y: _rhs3(y.reshape(shape), lam, mu, mask, below).ravel()
        y0 = init.mass.ravel()
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 1:
        return y0[None, :]
    sol = solve_ivp(
        fun,
        (t_grid[0], t_grid[-1]),
        y0,
        method=method,
        t_eval=t_grid,
        rtol=tol.ode_rel_tol,
        atol=tol.ode_abs_tol,
    )
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return sol.y.T


def _expand(grid: TruncationGrid) -> TruncationGrid:
    return TruncationGrid(int(grid.j_max * 1.5) + 2, int(grid.k_max * 1.5) + 2)


def integrate(
    init,
    t_grid,
    params: ModelParams,
    tol: Tolerances = DEFAULT_TOL,
    method: str = "RK45",
    auto_expand: bool = True,
    max_expansions: int = 4,
) -> Trajectory:
    """Integrate the mean-field equations of ``params.model`` from ``init``.

    States are stored at each time of ``t_grid`` (which must start at the
    initial time). Negative round-off is clipped; a state is renormalized only
    if its total probability drifted by more than 1e-12. For Model 1 the box
    is enlarged and the run repeated whenever the particle mass drifts by more
    than ``tol.mass_tol``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be a non-empty increasing sequence")
    U = params.fleet_density
    if params.model is Model.NO_RESERVATION_FINITE:
        if not isinstance(init, MarginalDist) or init.K != params.capacity:
            raise ValueError("Model 2 needs a MarginalDist on 0..K")
        if init.mean() > U + tol.mass_tol:
            raise InvalidStateError("initial mean of parked cars exceeds the fleet density")
    else:
        if not isinstance(init, JointDist):
            raise ValueError("Models 1 and 3 need a JointDist")
        if params.model is Model.RESERVATION_FINITE and init.grid != TruncationGrid.for_capacity(params.capacity):
            raise ValueError("Model 3 needs the exact j + k <= K grid")
        m0 = total_mass(init)
        if abs(m0 - U) > 1e-8 * max(1.0, U):
            raise ValueError(f"initial state carries mass {m0}, expected fleet density {U}")

    expansions = 0
    while True:
        raw = _solve(init, t_grid, params, tol, method)
        grid = getattr(init, "grid", None)
        states, renorm, drift, trunc = [], 0, 0.0, 0.0
        if grid is not None:
            weight = np.add.outer(np.arange(grid.shape[0]), np.arange(grid.shape[1])).ravel()
            # truncation loss shows up in the raw vectors; clipping noise does not
            trunc = float(np.abs(raw @ weight - U).max())
        most_negative = min(0.0, float(raw.min()))
        if most_negative < -1e-12:
            log.debug("clipping negative probabilities down to %.3e", most_negative)
        for vec in raw:
            vec = np.clip(vec, 0.0, None)
            s = vec.sum()
            if abs(s - 1.0) > 1e-12:
                log.debug("renormalizing state by %.3e", s - 1.0)
                renorm += 1
            state = _wrap(params, grid, vec)
            if params.model is not Model.NO_RESERVATION_FINITE:
                drift = max(drift, abs(total_mass(state) - U))
            states.append(state)
        if params.model is Model.RESERVATION_INFINITE and trunc > tol.mass_tol and auto_expand:
            if expansions >= max_expansions:
                break
            expansions += 1
            bigger = _expand(init.grid)
            log.info("mass drift %.2e: enlarging grid to %s", trunc, bigger.shape)
            init = init.regrid(bigger)
            continue
        break
    if params.model is not Model.NO_RESERVATION_FINITE and drift > 100 * tol.mass_tol:
        raise MassConservationError(f"particle mass drifted by {drift:.3e}")
    funcs: dict[str, list] = {}
    for s in states:
        for name, value in functionals(s, params).items():
            funcs.setdefault(name, []).append(value)
    return Trajectory(
        times=t_grid,
        states=states,
        functionals={k: np.asarray(v) for k, v in funcs.items()},
        params=params,
        mass_drift=drift,
        renormalizations=renorm,
    )


# ---------------------------------------------------------------- generating-function checks


def _probe_residual(mass, dmass_dt, params: ModelParams, x, y) -> float:
    lam, mu = params.lam, params.mu
    if params.model is Model.NO_RESERVATION_FINITE:
        z = x
        K = mass.size - 1
        zz = np.power(float(z), np.arange(K + 1))
        Q, Qt = zz @ mass, zz @ dmass_dt
        arrival = mu * (params.fleet_density - float(np.arange(K + 1) @ mass))
        lhs = Qt + (arrival * (1 - z) + lam * (1 - 1 / z)) * Q
        rhs = lam * (1 - 1 / z) * mass[0] + arrival * mass[K] * z**K * (1 - z)
        return abs(lhs - rhs)
    F, Fx = generating_function(mass, x, y)
    Ft, _ = generating_function(dmass_dt, x, y)
    F_x0, _ = generating_function(mass, x, 0.0)
    if params.model is Model.RESERVATION_INFINITE:
        b = 1.0 - mass[:, 0].sum()
        lhs = Ft + (lam * b * (1 - x) + lam * (1 - 1 / y)) * F
        rhs = mu * (y - x) * Fx + lam * (1 - 1 / y) * F_x0
        return abs(lhs - rhs)
    K = mass.shape[0] - 1
    d = 1.0 - mass[:, 0].sum()
    diag = np.array([mass[j, K - j] for j in range(K + 1)])
    c = 1.0 - diag.sum()
    FK = sum(diag[j] * x**j * y ** (K - j) for j in range(K + 1))
    lhs = Ft + (lam * d * (1 - x) + lam * c * (1 - 1 / y)) * F
    rhs = mu * (y - x) * Fx + lam * c * (1 - 1 / y) * F_x0 + lam * d * (1 - x) * FK
    return abs(lhs - rhs)


def functional_residual(traj: Trajectory, params: ModelParams, probe_points) -> dict:
    """Max residual of the generating-function form of the dynamics per probe.

    ``dF/dt`` is a central difference on the stored time grid, so the
    trajectory needs at least three states and a fine enough grid. For Model 2
    only the first coordinate of a probe is used.
    """
    if len(traj) < 3:
        raise ValueError("need at least three stored states for central differences")
    for x, y in probe_points:
        if abs(x) > 1 or abs(y) > 1 or y == 0 or (params.model is Model.NO_RESERVATION_FINITE and x == 0):
            raise ValueError(f"probe ({x}, {y}) outside 0 < |y| <= 1, |x| <= 1")
    t = traj.times
    masses = [s.mass for s in traj.states]
    report = {}
    for x, y in probe_points:
        worst = 0.0
        for i in range(1, len(t) - 1):
            dm = (masses[i + 1] - masses[i - 1]) / (t[i + 1] - t[i - 1])
            worst = max(worst, _probe_residual(masses[i], dm, params, x, y))
        report[(x, y)] = worst
    return report


def stationary_residual(state, params: ModelParams, probe_points) -> dict:
    """Generating-function residual with ``dF/dt = 0`` (i.e. of the rhs at the state)."""
    if params.model is Model.RESERVATION_INFINITE:
        deriv = rhs_model1(state, params)
    elif params.model is Model.NO_RESERVATION_FINITE:
        deriv = rhs_model2(state, params)
    else:
        deriv = rhs_model3(state, params)
    zero = np.zeros_like(deriv)
    # the rhs itself is the dF/dt consistent with the state; stationarity means it vanishes
    return {p: max(_probe_residual(state.mass, zero, params, *p), 0.0) for p in probe_points} | {
        "rhs_l1": float(np.abs(deriv).sum())
    }

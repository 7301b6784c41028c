"""Transient M(t)/M/1 queue on a truncated state space.

Forward equations for ``p_n(t)`` with a time-varying arrival rate and a
constant service rate ``serv``. The top state reflects (no arrivals), so the
total probability is exact and truncation shows up as mass piling at the top,
which is monitored. Called from the reservation model, the queue of parked
cars has arrivals ``delta(t)`` and service rate ``lam``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

log = logging.getLogger(__name__)


class TailMassError(RuntimeError):
    pass


class DominanceViolation(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class BDState:
    p: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("state must be a non-empty vector")
        if np.any(p < -1e-12):
            raise ValueError(f"negative probability {p.min():.3e}")
        if abs(p.sum() - 1.0) > 1e-10:
            raise ValueError(f"probabilities sum to {p.sum()!r}")
        object.__setattr__(self, "p", p)

    @classmethod
    def point(cls, n: int, size: int | None = None) -> "BDState":
        size = max(size or 0, n + 1)
        p = np.zeros(size)
        p[n] = 1.0
        return cls(p)

    @classmethod
    def from_probs(cls, probs) -> "BDState":
        p = np.asarray(probs, dtype=float)
        return cls(p / p.sum())

    @property
    def s(self) -> np.ndarray:
        """Distribution function ``s_n = P(N <= n)``."""
        s = np.cumsum(self.p)
        s[-1] = 1.0
        return s

    @property
    def n_max(self) -> int:
        return self.p.size - 1

    @property
    def empty(self) -> float:
        return float(self.p[0])

    def padded(self, n_max: int) -> np.ndarray:
        if n_max < self.n_max:
            if np.any(self.p[n_max + 1 :] > 0):
                raise ValueError("cannot shrink a state that has mass above the cut")
            return self.p[: n_max + 1].copy()
        out = np.zeros(n_max + 1)
        out[: self.p.size] = self.p
        return out


class ArrivalProfile:
    """Non-negative arrival rate ``beta(t)`` from a callable or a table.

    Tables are interpolated linearly and held constant beyond their ends.
    ``limit`` is the long-run value when known.
    """

    def __init__(self, fn: Callable[[float], float] | None = None, times=None, values=None, limit: float | None = None):
        if (fn is None) == (times is None):
            raise ValueError("give either a callable or a (times, values) table")
        if fn is None:
            times = np.asarray(times, dtype=float)
            values = np.asarray(values, dtype=float)
            if times.shape != values.shape or times.ndim != 1 or np.any(np.diff(times) <= 0):
                raise ValueError("table needs increasing times and matching values")
            if np.any(values < 0):
                raise ValueError("arrival rate must be non-negative")
            fn = lambda t: float(np.interp(t, times, values))
            if limit is None:
                limit = float(values[-1])
        self._fn = fn
        self.limit = limit

    def __call__(self, t: float) -> float:
        v = float(self._fn(t))
        if v < 0 or not math.isfinite(v):
            raise ValueError(f"arrival rate {v} at t={t}")
        return v

    def sample(self, t_grid) -> np.ndarray:
        return np.array([self(t) for t in np.asarray(t_grid, dtype=float)])

    @classmethod
    def constant(cls, rate: float) -> "ArrivalProfile":
        if rate < 0:
            raise ValueError("arrival rate must be non-negative")
        return cls(lambda t: rate, limit=float(rate))


def default_n_max(rate_max: float, serv: float) -> int:
    if rate_max < serv:
        return int(math.ceil(20 + 10 * rate_max / (serv - rate_max)))
    return 200


def _rhs(p, beta, serv):
    out = np.empty_like(p)
    out[0] = -beta * p[0] + serv * p[1]
    out[1:-1] = beta * p[:-2] - (beta + serv) * p[1:-1] + serv * p[2:]
    out[-1] = beta * p[-2] - serv * p[-1]
    return out


def _integrate(p0, profile, serv, t_grid, rtol, atol):
    if t_grid.size == 1:
        return p0[None, :]
    sol = solve_ivp(
        lambda t, y: _rhs(y, profile(t), serv),
        (t_grid[0], t_grid[-1]),
        p0,
        method="RK45",
        t_eval=t_grid,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return sol.y.T


def evolve(
    init: BDState,
    profile: ArrivalProfile,
    serv: float,
    t_grid,
    n_max: int | None = None,
    tail_tol: float = 1e-10,
    rtol: float = 1e-10,
    atol: float = 1e-14,
    max_doublings: int = 6,
) -> list[BDState]:
    """States of the queue at the times of ``t_grid``.

    The cut ``n_max`` doubles until the top state never holds more than
    ``tail_tol``.
    """
    if serv <= 0:
        raise ValueError("service rate must be positive")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be a non-empty increasing sequence")
    if n_max is None:
        n_max = default_n_max(profile.sample(t_grid).max(), serv)
    n_max = max(n_max, init.n_max, 1)
    for _ in range(max_doublings + 1):
        traj = _integrate(init.padded(n_max), profile, serv, t_grid, rtol, atol)
        top = float(np.max(np.abs(traj[:, -1])))
        if top <= tail_tol:
            break
        log.info("top state holds %.2e: doubling cut to %d", top, 2 * n_max)
        n_max *= 2
    else:
        raise TailMassError(f"tail mass {top:.2e} above {tail_tol} with n_max={n_max // 2}")
    worst = float(traj.min())
    if worst < 0:
        log.debug("most negative entry %.3e", worst)
    return [BDState(row) for row in traj]


@dataclass(frozen=True)
class DominanceReport:
    worst_gap: float  # max over times and n of S_gamma - S_beta
    worst_empty_gap: float  # max over times of H_gamma - H_beta
    n_times: int
    tol: float = 1e-9

    @property
    def holds(self) -> bool:
        return self.worst_gap <= self.tol


def _common_runs(init_a: BDState, init_b: BDState, pa, pb, serv, t_grid, n_max):
    t_grid = np.asarray(t_grid, dtype=float)
    if n_max is None:
        rate_max = max(pa.sample(t_grid).max(), pb.sample(t_grid).max())
        n_max = max(default_n_max(rate_max, serv), init_a.n_max, init_b.n_max)
    ra = evolve(init_a, pa, serv, t_grid, n_max=n_max)
    rb = evolve(init_b, pb, serv, t_grid, n_max=n_max)
    size = max(ra[0].p.size, rb[0].p.size)
    A = np.array([s.padded(size - 1) for s in ra])
    B = np.array([s.padded(size - 1) for s in rb])
    return t_grid, A, B


def dominance_check(
    beta: ArrivalProfile,
    gamma: ArrivalProfile,
    init_b: BDState,
    init_g: BDState,
    serv: float,
    t_grid,
    tol: float = 1e-9,
    n_max: int | None = None,
) -> DominanceReport:
    """Check ``S_beta(t) >= S_gamma(t)`` componentwise when ``beta <= gamma``."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(beta.sample(t_grid) > gamma.sample(t_grid)):
        raise ValueError("dominance needs beta(t) <= gamma(t) on the grid")
    size = max(init_b.p.size, init_g.p.size)
    sb0 = np.cumsum(init_b.padded(size - 1))
    sg0 = np.cumsum(init_g.padded(size - 1))
    if np.any(sb0 < sg0 - 1e-12):
        raise ValueError("dominance needs S_beta(0) >= S_gamma(0)")
    _, Pb, Pg = _common_runs(init_b, init_g, beta, gamma, serv, t_grid, n_max)
    gap = np.cumsum(Pg, axis=1) - np.cumsum(Pb, axis=1)
    report = DominanceReport(float(gap.max()), float(np.max(Pg[:, 0] - Pb[:, 0])), t_grid.size, tol)
    if report.worst_gap > tol:
        raise DominanceViolation(f"S_gamma exceeds S_beta by {report.worst_gap:.3e}")
    return report


@dataclass(frozen=True)
class LipschitzReport:
    distance: float  # sup_t of the l1 distance between the two laws
    profile_gap: float  # sup_t |beta - gamma| on the grid
    ratio: float


def lipschitz_probe(beta, gamma, init: BDState, serv: float, t_grid, n_max: int | None = None) -> LipschitzReport:
    """Empirical constant of ``sup_t |P_beta - P_gamma|_1 <= K sup_t |beta - gamma|``."""
    t_grid = np.asarray(t_grid, dtype=float)
    dense = np.linspace(t_grid[0], t_grid[-1], 4 * t_grid.size)
    gap = float(np.max(np.abs(beta.sample(dense) - gamma.sample(dense))))
    if gap == 0.0:
        raise ValueError("profiles coincide: the ratio is undefined")
    _, Pb, Pg = _common_runs(init, init, beta, gamma, serv, t_grid, n_max)
    dist = float(np.max(np.abs(Pb - Pg).sum(axis=1)))
    return LipschitzReport(dist, gap, dist / gap)


def geometric_law(r: float, n_max: int) -> np.ndarray:
    return (1.0 - r) * r ** np.arange(n_max + 1)


@dataclass(frozen=True)
class StationaryReport:
    l1: float
    limit: float
    ratio: float
    horizon: float


def stationary_equivalence(
    delta_profile: ArrivalProfile,
    serv: float,
    horizon: float,
    init: BDState | None = None,
    n_points: int = 201,
) -> StationaryReport:
    """L1 distance at ``horizon`` between the queue and the M/M/1 law of the limiting rate."""
    limit = delta_profile.limit if delta_profile.limit is not None else delta_profile(horizon)
    if limit >= serv:
        raise ValueError(f"limit rate {limit} is not below the service rate {serv}")
    init = init or BDState.point(0)
    t_grid = np.linspace(0.0, horizon, n_points)
    n_max = max(default_n_max(max(delta_profile.sample(t_grid).max(), limit), serv), init.n_max)
    final = evolve(init, delta_profile, serv, t_grid, n_max=n_max)[-1]
    r = limit / serv
    ref = geometric_law(r, final.n_max)
    l1 = float(np.abs(final.p - ref).sum() + r ** (final.n_max + 1))
    return StationaryReport(l1, float(limit), r, float(horizon))

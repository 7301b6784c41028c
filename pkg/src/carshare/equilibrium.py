"""Equilibrium points of the three mean-field models.

Model 1 has a closed form: a Poisson(rho*beta) x Geometric(beta) product
measure with ``beta`` the small root of ``U = rho*beta + beta/(1-beta)``.
Model 2 is a truncated geometric law whose ratio solves a scalar fixed point,
and Model 3 a capacity-restricted product form fixed by two scalar equations.
All root finding is plain bisection on a verified sign change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .core import (
    DEFAULT_TOL,
    JointDist,
    MarginalDist,
    Model,
    ModelParams,
    TruncationGrid,
    total_mass,
)

MAX_BISECTIONS = 200


class ConvergenceError(RuntimeError):
    """A root finder or fixed-point iteration did not converge."""


def bisect(f, lo: float, hi: float, tol: float = 0.0, max_iter: int = MAX_BISECTIONS) -> float:
    """Root of ``f`` in ``[lo, hi]`` given ``f(lo) <= 0 <= f(hi)``.

    Stops when the bracket is narrower than ``tol`` or cannot be split any
    further in floating point.
    """
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise ValueError(f"no sign change on [{lo}, {hi}]: f={flo}, {fhi}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo <= tol:
            break
        if f(mid) <= 0:
            lo = mid
        else:
            hi = mid
    else:
        raise ConvergenceError(f"bisection exhausted {max_iter} steps, bracket [{lo}, {hi}]")
    return 0.5 * (lo + hi)


def _grow_bracket(f, hi: float, limit: float = 1e12) -> float:
    while f(hi) < 0:
        hi *= 2.0
        if hi > limit:
            raise ConvergenceError("could not bracket the root")
    return hi


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    model: Model
    pi: JointDist | MarginalDist = field(repr=False)
    beta: float | None = None
    delta_bar: float | None = None
    rho_R: float | None = None
    rho_V: float | None = None
    Z: float | None = None
    residuals: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"model": self.model.value}
        for name in ("beta", "delta_bar", "rho_R", "rho_V", "Z"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        out["residuals"] = dict(self.residuals)
        return out


# ---------------------------------------------------------------- Model 1


def beta_model1(params: ModelParams) -> float:
    """Limit of the fraction of stations holding at least one car."""
    U, rho = params.fleet_density, params.rho
    if U == 0:
        return 0.0
    s = U + rho + 1.0
    disc = s * s - 4.0 * rho * U
    assert disc >= 0.0, disc
    # small root written as 2U / (s + sqrt(disc)) to avoid cancellation
    beta = 2.0 * U / (s + math.sqrt(disc))
    assert 0.0 <= beta < 1.0, beta
    return beta


def model1_mass_residual(params: ModelParams, beta: float) -> float:
    return abs(params.rho * beta + beta / (1.0 - beta) - params.fleet_density)


def delta_bar(params: ModelParams) -> float:
    """Stationary reservation-completion rate, ``lambda * beta``."""
    value = params.lam * beta_model1(params)
    assert value < params.lam
    return value


def poisson_pmf(mean: float, n: int) -> np.ndarray:
    """Poisson probabilities on ``0..n`` computed in log space."""
    j = np.arange(n + 1)
    if mean == 0:
        out = np.zeros(n + 1)
        out[0] = 1.0
        return out
    return np.exp(j * math.log(mean) - mean - gammaln(j + 1))


def geometric_pmf(q: float, n: int) -> np.ndarray:
    """``(1-q) q**k`` on ``0..n``."""
    k = np.arange(n + 1)
    if q == 0:
        out = np.zeros(n + 1)
        out[0] = 1.0
        return out
    return (1.0 - q) * np.exp(k * math.log(q))


def model1_tail_mass(params: ModelParams, grid: TruncationGrid) -> float:
    """Equilibrium probability of the cells the grid omits."""
    beta = beta_model1(params)
    inside = poisson_pmf(params.rho * beta, grid.j_max).sum() * geometric_pmf(beta, grid.k_max).sum()
    return max(0.0, 1.0 - inside)


def pi_model1(params: ModelParams, grid: TruncationGrid, tail_tol: float = 1e-12) -> JointDist:
    beta = beta_model1(params)
    tail = model1_tail_mass(params, grid)
    if tail > tail_tol:
        raise ValueError(f"grid {grid.shape} omits equilibrium mass {tail:.2e} > {tail_tol:.0e}")
    return JointDist.product(grid, poisson_pmf(params.rho * beta, grid.j_max), geometric_pmf(beta, grid.k_max))


def solve_model1(params: ModelParams, grid: TruncationGrid | None = None) -> EquilibriumSolution:
    from .core import model1_grid

    grid = grid or model1_grid(params, tail=1e-14)
    beta = beta_model1(params)
    pi = pi_model1(params, grid)
    return EquilibriumSolution(
        model=Model.RESERVATION_INFINITE,
        pi=pi,
        beta=beta,
        delta_bar=params.lam * beta,
        residuals={
            "mass_equation": model1_mass_residual(params, beta),
            "mass_on_grid": abs(total_mass(pi) - params.fleet_density),
        },
    )


# ---------------------------------------------------------------- Model 2


def truncated_geometric(beta: float, K: int) -> np.ndarray:
    """Weights proportional to ``beta**j`` on ``0..K``; any ``beta >= 0``."""
    if beta == 0:
        out = np.zeros(K + 1)
        out[0] = 1.0
        return out
    logw = np.arange(K + 1) * math.log(beta)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def truncated_geometric_mean(beta: float, K: int) -> float:
    # equals beta/(1-beta) - (K+1) beta^(K+1)/(1-beta^(K+1)), continuous at beta = 1
    return float(np.arange(K + 1) @ truncated_geometric(beta, K))


def model2_gap(beta: float, params: ModelParams) -> float:
    """``beta - (mu/lam)(U - m_K(beta))``; increasing in beta, zero at the fixed point."""
    K = params.capacity
    return beta - (params.mu / params.lam) * (params.fleet_density - truncated_geometric_mean(beta, K))


def beta_model2(params: ModelParams, tol: float = DEFAULT_TOL.fixed_point_tol) -> float:
    """Ratio of the stationary truncated-geometric law of Model 2.

    The ratio exceeds 1 when most of the capacity is occupied, so the bracket
    grows past 1 as needed.
    """
    if not params.finite:
        raise ValueError("Model 2 needs a finite capacity")
    if params.fleet_density == 0:
        return 0.0
    f = lambda b: model2_gap(b, params)
    hi = _grow_bracket(f, 1.0)
    return bisect(f, 0.0, hi, tol=tol * 1e-3)


def pi_model2(beta: float, K: int) -> MarginalDist:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return MarginalDist(truncated_geometric(beta, K))


def solve_model2(params: ModelParams) -> EquilibriumSolution:
    beta = beta_model2(params)
    pi = pi_model2(beta, params.capacity)
    return EquilibriumSolution(
        model=Model.NO_RESERVATION_FINITE,
        pi=pi,
        beta=beta,
        residuals={"fixed_point": abs(model2_gap(beta, params))},
    )


# ---------------------------------------------------------------- Model 3


def product_form3(p: float, q: float, K: int) -> np.ndarray:
    """Normalized ``p**j / j! * q**k`` on ``j + k <= K`` as a (K+1)x(K+1) array."""
    j, k = np.indices((K + 1, K + 1))
    mask = j + k <= K
    with np.errstate(divide="ignore"):
        lp = math.log(p) if p > 0 else -np.inf
        lq = math.log(q) if q > 0 else -np.inf
    with np.errstate(invalid="ignore"):
        logw = np.where(j > 0, j * lp, 0.0) - gammaln(j + 1) + np.where(k > 0, k * lq, 0.0)
    logw = np.where(mask, logw, -np.inf)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _norm_const3(p: float, q: float, K: int) -> float:
    j, k = np.indices((K + 1, K + 1))
    mask = j + k <= K
    w = np.where(mask, np.power(p, j) / np.exp(gammaln(j + 1)) * np.power(q, k), 0.0)
    return float(w.sum())


def model3_rates(pi: np.ndarray) -> tuple[float, float]:
    """``(d, c)``: probability of a parked car, probability of a free slot."""
    K = pi.shape[0] - 1
    d = 1.0 - pi[:, 0].sum()
    c = 1.0 - sum(pi[j, K - j] for j in range(K + 1))
    return float(d), float(c)


def _mass3(pi: np.ndarray) -> float:
    j, k = np.indices(pi.shape)
    return float(((j + k) * pi).sum())


def model3_residuals(p: float, q: float, params: ModelParams) -> tuple[float, float]:
    """The two equations fixing ``(rho_R, rho_V)``, as signed residuals."""
    pi = product_form3(p, q, params.capacity)
    d, _ = model3_rates(pi)
    return p - params.rho * d, _mass3(pi) - params.fleet_density


def _inner_p(q: float, params: ModelParams, tol: float) -> float:
    K, rho = params.capacity, params.rho
    if q == 0:
        return 0.0
    f = lambda p: p - rho * model3_rates(product_form3(p, q, K))[0]
    # inner contraction first, bisection when it stalls
    p = rho * model3_rates(product_form3(rho, q, K))[0]
    for _ in range(50):
        p_new = rho * model3_rates(product_form3(p, q, K))[0]
        if abs(p_new - p) <= tol:
            p = p_new
            break
        p = p_new
    else:
        return bisect(f, 0.0, rho, tol=tol * 1e-3)
    if abs(f(p)) > 10 * tol:
        return bisect(f, 0.0, rho, tol=tol * 1e-3)
    return p


def solve_model3(params: ModelParams, tol: float = DEFAULT_TOL.fixed_point_tol) -> EquilibriumSolution:
    """Capacity-restricted product form for Model 3.

    Outer bisection on the car intensity ``q``; for each ``q`` the reservation
    intensity ``p`` solves ``p = (lam/mu) d(p, q)``; ``q`` is then matched to
    the fleet density.
    """
    if params.model is not Model.RESERVATION_FINITE:
        raise ValueError("solve_model3 expects Model 3 parameters")
    K, U = params.capacity, params.fleet_density
    if U == 0:
        pi = np.zeros((K + 1, K + 1))
        pi[0, 0] = 1.0
        return EquilibriumSolution(
            model=params.model,
            pi=JointDist(TruncationGrid.for_capacity(K), pi),
            rho_R=0.0,
            rho_V=0.0,
            Z=1.0,
            residuals={"reservation": 0.0, "mass": 0.0},
        )
    if U >= K:
        raise ValueError("Model 3 needs fleet density strictly below capacity")

    def mass_gap(q):
        p = _inner_p(q, params, tol)
        return _mass3(product_form3(p, q, K)) - U

    hi = _grow_bracket(mass_gap, 1.0)
    q = bisect(mass_gap, 0.0, hi, tol=tol * 1e-3)
    p = _inner_p(q, params, tol)
    res_p, res_m = model3_residuals(p, q, params)
    if abs(res_p) > tol or abs(res_m) > tol * max(1.0, U):
        raise ConvergenceError(f"Model 3 residuals {res_p:.2e}, {res_m:.2e} at p={p}, q={q}")
    pi = product_form3(p, q, K)
    return EquilibriumSolution(
        model=params.model,
        pi=JointDist(TruncationGrid.for_capacity(K), pi),
        rho_R=p,
        rho_V=q,
        Z=_norm_const3(p, q, K),
        residuals={"reservation": abs(res_p), "mass": abs(res_m)},
    )


def solve(params: ModelParams) -> EquilibriumSolution:
    if params.model is Model.RESERVATION_INFINITE:
        return solve_model1(params)
    if params.model is Model.NO_RESERVATION_FINITE:
        return solve_model2(params)
    return solve_model3(params)


# ---------------------------------------------------------------- checks


def generating_function(mass: np.ndarray, x, y):
    """``F(x, y) = sum alpha[j,k] x**j y**k`` and ``dF/dx``."""
    J, Kc = mass.shape
    xj = np.power(complex(x) if np.iscomplexobj(x) else float(x), np.arange(J))
    yk = np.power(complex(y) if np.iscomplexobj(y) else float(y), np.arange(Kc))
    dxj = np.zeros_like(xj)
    dxj[1:] = np.arange(1, J) * xj[:-1]
    return xj @ mass @ yk, dxj @ mass @ yk


DEFAULT_PROBES = [(x, y) for x in (0.0, 0.25, 0.5, 0.75, 1.0) for y in (0.25, 0.5, 0.75, 1.0)]


def product_form_check(dist: JointDist, params: ModelParams, delta: float, probes=None) -> float:
    """Largest residual of the stationary tandem equations for a Model 1 candidate.

    Checks the stationary generating-function equation at ``probes`` together
    with ``delta = mu*E[j] = lam*(1 - F(1, 0))``.
    """
    lam, mu = params.lam, params.mu
    mass = dist.mass
    worst = 0.0
    for x, y in probes or DEFAULT_PROBES:
        F, Fx = generating_function(mass, x, y)
        F_x0, _ = generating_function(mass, x, 0.0)
        lhs = (delta * (1 - x) + lam * (1 - 1 / y)) * F
        rhs = mu * (y - x) * Fx + lam * (1 - 1 / y) * F_x0
        worst = max(worst, abs(lhs - rhs))
    mean_res = float(dist.marginal_reservations() @ np.arange(dist.grid.j_max + 1))
    busy = 1.0 - float(mass[:, 0].sum())
    worst = max(worst, abs(delta - mu * mean_res), abs(delta - lam * busy))
    return worst

"""Transient reservation-completion rate of Model 1.

With the reservation queue empty at time zero, reservations complete as a
Poisson process of rate ``delta(t)``, and the car queue is an M(t)/M/1 queue
with service rate ``lam``. Its emptiness probability ``H`` solves a Volterra
equation of the second kind whose kernel involves modified Bessel functions,
while ``delta`` obeys ``delta' + mu*delta = lam*mu*(1 - H)``.

Everything is discretized on a uniform grid: cumulative rate ``A`` by the
trapezoid rule, the Volterra integral by product trapezoid, and the linear
ODE through its exact integrating factor with a trapezoidal source. The
discretization has an error expansion in even powers of ``h``, so step
halving plus Richardson extrapolation is available throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .bessel import i0e, i1e
from .core import DEFAULT_TOL, ModelParams
from .equilibrium import beta_model1, delta_bar

# ---------------------------------------------------------------- data


@dataclass(frozen=True, eq=False)
class RateFunction:
    """Samples ``values[i] = delta(i * h)``."""

    h: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("rate samples must be a non-empty vector")
        if np.any(v < -1e-12):
            raise ValueError("rate function must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.values.size)

    @property
    def horizon(self) -> float:
        return self.h * (self.values.size - 1)

    @classmethod
    def constant(cls, value: float, horizon: float, h: float) -> "RateFunction":
        n = int(round(horizon / h))
        return cls(h, np.full(n + 1, float(value)))

    def cumulative(self) -> np.ndarray:
        """``A(t_i)`` by the trapezoid rule."""
        v = self.values
        out = np.zeros_like(v)
        out[1:] = np.cumsum(0.5 * self.h * (v[1:] + v[:-1]))
        return out


@dataclass(frozen=True, eq=False)
class VolterraSolution:
    h: float
    H: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    defect: float = float("nan")

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.H.size)


@dataclass(frozen=True)
class RateEstimate:
    v_hat: float
    v_theory: float | None
    window: tuple[float, float]
    r2: float
    exponent: float = 0.0
    v_hat_plain: float = float("nan")

    @property
    def relative_error(self) -> float:
        return abs(self.v_hat - self.v_theory) / self.v_theory


def car_distribution(probs) -> np.ndarray:
    """Validate an initial law of the number of parked cars (finite support)."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0):
        raise ValueError("initial car distribution must be a non-negative vector")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"initial car distribution sums to {p.sum()!r}")
    return p


def geometric_cars(q: float, rel_tail: float = 1e-14) -> np.ndarray:
    """Geometric law ``(1-q) q**m`` cut where the tail drops below ``rel_tail``."""
    if not 0 <= q < 1:
        raise ValueError("geometric ratio must lie in [0, 1)")
    if q == 0:
        return np.array([1.0])
    n = int(math.ceil(math.log(rel_tail) / math.log(q)))
    p = (1 - q) * q ** np.arange(n + 1)
    return p / p.sum()


# ---------------------------------------------------------------- kernels
#
# Z(s, t) = Y - X with Y ~ Poisson(A_t - A_s) (returns) and X ~ Poisson(lam (t - s))
# (departure attempts) is the free walk of the car queue. With q_m = P(Z = m),
# the kernel is D = q_0 - q_1 and d q_m / dA = q_{m-1} - q_m.


@njit(cache=True)
def _walk_probs(tau, dA, lam):
    """``(q_-1, q_0, q_1)`` of the free walk."""
    lt = lam * tau
    if tau <= 0.0:
        return 0.0, 1.0, 0.0
    if dA <= 0.0:
        e = math.exp(-lt)
        return lt * e, e, 0.0
    s = math.sqrt(lt) - math.sqrt(dA)
    s2 = s * s
    if s2 > 700.0:
        return 0.0, 0.0, 0.0
    z = 2.0 * math.sqrt(lt * dA)
    e = math.exp(-s2)
    r = math.sqrt(dA / lt)
    i1 = i1e(z)
    return e * i1 / r, e * i0e(z), e * r * i1


@njit(cache=True)
def _kernel(tau, dA, lam):
    if tau <= 0.0:
        return 1.0
    lt = lam * tau
    if dA <= 0.0:
        return math.exp(-lt)
    s = math.sqrt(lt) - math.sqrt(dA)
    s2 = s * s
    if s2 > 700.0:
        return 0.0
    z = 2.0 * math.sqrt(lt * dA)
    return math.exp(-s2) * (i0e(z) - math.sqrt(dA / lt) * i1e(z))


@njit(cache=True)
def _log_poisson(n, mean, logmean):
    return n * logmean - mean - math.lgamma(n + 1.0)


@njit(cache=True)
def _psi(P, u, A):
    # coefficient extraction = P(N0 + Y - X = 0), X ~ Poisson(u), Y ~ Poisson(A)
    M = P.size - 1
    if u <= 0.0:
        return P[0] * math.exp(-A)
    lu = math.log(u)
    su = math.sqrt(u)
    x_lo = max(0, int(u - 12.0 * su - 30.0))
    x_hi = int(u + 12.0 * su + 30.0)
    pu = np.empty(x_hi - x_lo + 1)
    for x in range(x_lo, x_hi + 1):
        pu[x - x_lo] = math.exp(_log_poisson(x, u, lu))
    if A <= 0.0:
        total = 0.0
        for m in range(max(0, x_lo), min(M, x_hi) + 1):
            total += P[m] * pu[m - x_lo]
        return total
    la = math.log(A)
    b_hi = min(x_hi, int(A + 12.0 * math.sqrt(A) + 30.0))
    b_lo = max(0, x_lo - M)
    total = 0.0
    for b in range(b_lo, b_hi + 1):
        pa = math.exp(_log_poisson(b, A, la))
        inner = 0.0
        for m in range(max(0, x_lo - b), min(M, x_hi - b) + 1):
            inner += P[m] * pu[m + b - x_lo]
        total += pa * inner
    return total


@njit(cache=True)
def _phi(P, u, A):
    # P(N0 + Y - X <= 0)
    M = P.size - 1
    if u <= 0.0:
        return P[0] * math.exp(-A)
    lu = math.log(u)
    x_hi = int(u + 12.0 * math.sqrt(u) + 30.0)
    surv = np.empty(x_hi + 1)
    acc = 0.0
    for x in range(x_hi, -1, -1):
        acc += math.exp(_log_poisson(x, u, lu))
        surv[x] = acc
    if A <= 0.0:
        total = 0.0
        for m in range(0, min(M, x_hi) + 1):
            total += P[m] * surv[m]
        return total
    la = math.log(A)
    b_hi = min(x_hi, int(A + 12.0 * math.sqrt(A) + 30.0))
    total = 0.0
    for b in range(0, b_hi + 1):
        pa = math.exp(_log_poisson(b, A, la))
        inner = 0.0
        for m in range(0, min(M, x_hi - b) + 1):
            inner += P[m] * surv[m + b]
        total += pa * inner
    return total


@njit(cache=True)
def _forcing(P, u, A, reflected):
    if reflected:
        return _phi(P, u, A)
    return _psi(P, u, A)


@njit(cache=True)
def _history(lam, h, i, Ai, A, H, reflected):
    """Trapezoid sum over the known past ``j < i`` and its derivative in ``A_i``."""
    acc = 0.0
    dacc = 0.0
    for j in range(i):
        qm, q0, q1 = _walk_probs((i - j) * h, Ai - A[j], lam)
        w = 0.5 if j == 0 else 1.0
        if reflected:
            acc += w * q1 * H[j]
            dacc += w * (q0 - q1) * H[j]
        else:
            acc += w * (q0 - q1) * H[j]
            dacc += w * (qm - 2.0 * q0 + q1) * H[j]
    return acc, dacc


@njit(cache=True)
def _close(lam, h, F, acc, reflected):
    if reflected:
        return F - lam * h * acc
    return (F + lam * h * acc) / (1.0 - 0.5 * lam * h)


@njit(cache=True)
def _march_H(lam, h, A, F, H, reflected):
    H[0] = F[0]
    for i in range(1, A.size):
        acc, _ = _history(lam, h, i, A[i], A, H, reflected)
        H[i] = _close(lam, h, F[i], acc, reflected)


@njit(cache=True)
def _march_coupled(lam, mu, h, n, P, tol, max_iter, reflected, delta, H, A, F, iters):
    decay = math.exp(-mu * h)
    gain = 0.5 * lam * mu * h
    delta[0] = 0.0
    A[0] = 0.0
    F[0] = _forcing(P, 0.0, 0.0, reflected)
    H[0] = F[0]
    for i in range(1, n):
        if i >= 2:
            d = max(0.0, 2.0 * delta[i - 1] - delta[i - 2])
        else:
            d = delta[i - 1]
        base = decay * delta[i - 1] + gain * decay * (1.0 - H[i - 1])
        A0 = A[i - 1] + 0.5 * h * (delta[i - 1] + d)
        passes = 0
        Ai = A0
        Hi = 0.0
        Fi = 0.0
        while passes < max_iter:
            passes += 1
            # the history sum is linearized around A0; re-linearize if A_i moved
            acc0, dacc = _history(lam, h, i, A0, A, H, reflected)
            for _ in range(100):
                Ai = A[i - 1] + 0.5 * h * (delta[i - 1] + d)
                Fi = _forcing(P, lam * i * h, Ai, reflected)
                Hi = _close(lam, h, Fi, acc0 + dacc * (Ai - A0), reflected)
                d_new = base + gain * (1.0 - Hi)
                done = abs(d_new - d) <= tol
                d = d_new
                if done:
                    break
            Ai = A[i - 1] + 0.5 * h * (delta[i - 1] + d)
            if abs(Ai - A0) <= 1e-9:
                break
            A0 = Ai
        iters[i] = passes
        delta[i] = d
        A[i] = Ai
        F[i] = Fi
        H[i] = Hi


@njit(cache=True)
def _next_iterate(lam, mu, h, H, out):
    decay = math.exp(-mu * h)
    gain = 0.5 * lam * mu * h
    out[0] = 0.0
    for i in range(1, H.size):
        out[i] = decay * out[i - 1] + gain * (decay * (1.0 - H[i - 1]) + (1.0 - H[i]))


# ---------------------------------------------------------------- public operations

FORMS = ("reflected", "direct")


def _check_form(form: str) -> bool:
    if form not in FORMS:
        raise ValueError(f"unknown Volterra form {form!r}; expected one of {FORMS}")
    return form == "reflected"


def kernel_D(s: float, t: float, lam: float, A) -> float:
    """Volterra kernel ``D(s, t)``; ``A`` is the cumulative arrival rate (callable)."""
    if s > t:
        raise ValueError(f"kernel needs s <= t, got s={s}, t={t}")
    dA = float(A(t)) - float(A(s))
    if dA < -1e-15:
        raise ValueError("cumulative rate must be non-decreasing")
    return float(_kernel(t - s, max(dA, 0.0), lam))


def kernel_matrix(tau, dA, lam: float) -> np.ndarray:
    """Vectorized kernel on arrays of lags ``tau`` and rate increments ``dA``."""
    tau, dA = np.broadcast_arrays(np.asarray(tau, float), np.asarray(dA, float))
    out = np.empty(tau.shape)
    for idx in np.ndindex(tau.shape):
        out[idx] = _kernel(tau[idx], dA[idx], lam)
    return out


def psi_forcing(init_cars, lam: float, A, t_grid) -> np.ndarray:
    """Forcing term of the Volterra equation for an initial car law ``init_cars``.

    ``A`` holds the cumulative arrival rate sampled on ``t_grid``.
    """
    P = car_distribution(init_cars)
    t_grid = np.asarray(t_grid, dtype=float)
    A = np.asarray(A, dtype=float)
    return np.array([_psi(P, lam * t, a) for t, a in zip(t_grid, A)])


def _solve_H_raw(rate: RateFunction, lam: float, P: np.ndarray, reflected: bool = True):
    A = rate.cumulative()
    u = lam * rate.times
    F = np.array([_forcing(P, x, a, reflected) for x, a in zip(u, A)])
    H = np.empty_like(A)
    _march_H(lam, rate.h, A, F, H, reflected)
    return H, A


def solve_H(
    delta: RateFunction,
    lam: float,
    init_cars=(1.0,),
    richardson: bool = False,
    max_defect: float = 1e-3,
    form: str = "reflected",
) -> VolterraSolution:
    """Emptiness probability of the car queue under arrival rate ``delta``.

    ``form="direct"`` marches ``H = psi + lam * int D H`` as written. Because
    ``lam * int_0^inf D = 1`` that equation is a critical renewal equation and
    quadrature errors pile up linearly in time. ``form="reflected"`` (default)
    marches the equivalent ``H = P(N0 + Z <= 0) - lam * int P(Z(s,t) = 1) H(s) ds``,
    obtained by subtracting the identity ``lam * int P(Z(s,t) = 0) H(s) ds =
    P(N0 + Z < 0)``; its error stays bounded on long horizons.

    The defect is the usual step-halving estimate, obtained from a second
    solve on every other grid point (step ``2h``). With ``richardson=True`` the
    two solutions are combined on the common points, which leaves a grid of
    step ``2h``.
    """
    reflected = _check_form(form)
    P = car_distribution(init_cars)
    H, A = _solve_H_raw(delta, lam, P, reflected)
    psi = np.array([_psi(P, lam * t, a) for t, a in zip(delta.times, A)])
    coarse_delta = RateFunction(2 * delta.h, delta.values[::2])
    if coarse_delta.values.size < 2:
        return VolterraSolution(delta.h, H, psi, 0.0)
    Hc, _ = _solve_H_raw(coarse_delta, lam, P, reflected)
    diff = H[::2][: Hc.size] - Hc
    defect = float(np.max(np.abs(diff))) / 3.0
    if defect > max_defect:
        raise ValueError(f"grid too coarse: step-halving defect {defect:.2e}")
    if richardson:
        H2 = H[::2][: Hc.size]
        return VolterraSolution(2 * delta.h, H2 + diff / 3.0, psi[::2][: Hc.size], defect)
    return VolterraSolution(delta.h, H, psi, defect)


def default_step(params: ModelParams) -> float:
    return 0.04 / max(1.0, params.lam, params.mu)


def _coupled(params: ModelParams, P: np.ndarray, n: int, h: float, tol: float, reflected: bool):
    delta, H, A, F = (np.zeros(n) for _ in range(4))
    iters = np.zeros(n, dtype=np.int64)
    _march_coupled(params.lam, params.mu, h, n, P, tol, 20, reflected, delta, H, A, F, iters)
    if n > 1 and iters[1:].max() >= 20:
        raise RuntimeError("per-step fixed point did not converge")
    return delta, H, A


def solve_delta_system(
    params: ModelParams,
    init_cars,
    horizon: float,
    h: float | None = None,
    richardson: bool = True,
    tol: float = DEFAULT_TOL.fixed_point_tol,
    check_mass: bool = True,
    form: str = "reflected",
) -> tuple[RateFunction, VolterraSolution]:
    """Solve the coupled ``delta`` / ``H`` system with no reservations at time 0.

    The system is causal, so it is marched in time: at each step the new
    ``delta`` and ``H`` are found by a scalar fixed point (tolerance ``tol``).
    This is the limit of the monotone iteration started from ``delta = 0``.
    With ``richardson`` the march is repeated at ``h/2`` and extrapolated.
    See :func:`solve_H` for ``form``.
    """
    reflected = _check_form(form)
    P = car_distribution(init_cars)
    U = float(np.arange(P.size) @ P)
    if check_mass and abs(U - params.fleet_density) > 1e-9 * max(1.0, U):
        raise ValueError(f"initial cars carry density {U}, params say {params.fleet_density}")
    h = h or default_step(params)
    n = int(round(horizon / h)) + 1
    d, H, A = _coupled(params, P, n, h, tol, reflected)
    defect = float("nan")
    if richardson:
        d2, H2, _ = _coupled(params, P, 2 * n - 1, h / 2, tol, reflected)
        d2, H2 = d2[::2], H2[::2]
        defect = float(max(np.max(np.abs(d2 - d)), np.max(np.abs(H2 - H)))) / 3.0
        d = d2 + (d2 - d) / 3.0
        H = H2 + (H2 - H) / 3.0
        A = RateFunction(h, np.clip(d, 0.0, None)).cumulative()
    t = h * np.arange(d.size)
    bound = params.lam * (1.0 - np.exp(-params.mu * t))
    if np.any(d > bound + 1e-9):
        raise AssertionError("rate exceeds lam * (1 - exp(-mu t))")
    psi = np.array([_psi(P, params.lam * x, a) for x, a in zip(t, A)])
    return RateFunction(h, np.clip(d, 0.0, None)), VolterraSolution(h, H, psi, defect)


class MonotonicityError(AssertionError):
    pass


def _iterate_scheme(params, P, start: np.ndarray, h: float, tol: float, max_iter: int, reflected: bool = True):
    iterates = [start]
    nxt = np.empty_like(start)
    for _ in range(max_iter):
        H, _ = _solve_H_raw(RateFunction(h, np.clip(iterates[-1], 0.0, None)), params.lam, P, reflected)
        _next_iterate(params.lam, params.mu, h, H, nxt)
        iterates.append(nxt.copy())
        if np.max(np.abs(iterates[-1] - iterates[-2])) < tol:
            break
    else:
        raise RuntimeError(f"scheme did not settle in {max_iter} iterations")
    return iterates


def lower_scheme(
    params: ModelParams,
    init_cars,
    horizon: float,
    h: float,
    tol: float = DEFAULT_TOL.fixed_point_tol,
    max_iter: int = 500,
    slack: float = 1e-12,
) -> list[RateFunction]:
    """Iterates ``delta_n`` started from ``delta_0 = 0``; they must increase in ``n``."""
    P = car_distribution(init_cars)
    n = int(round(horizon / h)) + 1
    its = _iterate_scheme(params, P, np.zeros(n), h, tol, max_iter)
    for k in range(1, len(its)):
        if np.any(its[k] < its[k - 1] - slack):
            raise MonotonicityError(f"lower iterate {k} decreased by {np.max(its[k-1]-its[k]):.2e}")
    return [RateFunction(h, v) for v in its]


def upper_scheme(
    params: ModelParams,
    gamma0: float,
    init_cars,
    horizon: float,
    h: float,
    tol: float = DEFAULT_TOL.fixed_point_tol,
    max_iter: int = 500,
    check_monotone: bool = True,
    slack: float = 1e-12,
) -> list[RateFunction]:
    """Iterates ``gamma_n`` started from the constant ``gamma0`` in ``(0, lam)``.

    The sequence decreases when the initial car law is stochastically smaller
    than Geometric(gamma0/lam), i.e. when the constant-rate queue started from
    it stays at least as often empty as in its stationary regime.
    """
    if not 0 < gamma0 < params.lam:
        raise ValueError("gamma0 must lie in (0, lam)")
    P = car_distribution(init_cars)
    n = int(round(horizon / h)) + 1
    its = _iterate_scheme(params, P, np.full(n, float(gamma0)), h, tol, max_iter)
    if check_monotone:
        t = h * np.arange(n)
        if np.any(its[1] > gamma0 * (1 - np.exp(-params.mu * t)) + slack):
            raise MonotonicityError("first upper iterate exceeds gamma0 (1 - exp(-mu t))")
        for k in range(1, len(its)):
            if np.any(its[k] > its[k - 1] + slack):
                raise MonotonicityError(f"upper iterate {k} increased by {np.max(its[k]-its[k-1]):.2e}")
    return [RateFunction(h, v) for v in its]


def theoretical_rate(params: ModelParams) -> float:
    """``min(mu, lam (1 - sqrt(beta))**2)``."""
    beta = beta_model1(params)
    v1 = params.lam * (1.0 - math.sqrt(beta)) ** 2
    v2 = (math.sqrt(params.lam) - math.sqrt(delta_bar(params))) ** 2
    assert abs(v1 - v2) <= 1e-12 * max(1.0, v1), (v1, v2)
    return min(params.mu, v1)


def estimate_rate(
    times,
    series,
    limit: float,
    tol: float = 1e-13,
    params: ModelParams | None = None,
    prefactor: str = "free",
) -> RateEstimate:
    """Exponential decay rate of ``|series - limit|``.

    The fit window runs from the first time the gap falls below a tenth of
    its initial value to the last time it is still above ``1000 * tol``.
    ``prefactor="free"`` regresses ``log gap`` on ``t`` and ``log t`` so that
    algebraic prefactors such as ``t**-1.5`` do not bias the rate;
    ``prefactor="none"`` is a plain log-linear fit.
    """
    t = np.asarray(times, dtype=float)
    gap = np.abs(np.asarray(series, dtype=float) - limit)
    g0 = gap[0] if gap[0] > 0 else gap.max()
    start = np.flatnonzero(gap < 0.1 * g0)
    above = np.flatnonzero(gap > 1e3 * tol)
    if start.size == 0 or above.size == 0:
        raise ValueError("no decay window: series never leaves the initial gap or the tolerance floor")
    a, b = start[0], above[-1]
    if b - a < 5:
        raise ValueError("decay window is empty")
    tt, y = t[a : b + 1], np.log(gap[a : b + 1])
    keep = tt > 0
    tt, y = tt[keep], y[keep]

    def fit(cols):
        X = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        return coef, 1.0 - resid.var() / y.var()

    plain, r2_plain = fit([np.ones_like(tt), -tt])
    if prefactor == "free":
        coef, r2 = fit([np.ones_like(tt), -tt, np.log(tt)])
        v_hat, exponent = coef[1], coef[2]
    elif prefactor == "none":
        coef, r2 = plain, r2_plain
        v_hat, exponent = coef[1], 0.0
    else:
        raise ValueError(f"unknown prefactor mode {prefactor!r}")
    return RateEstimate(
        v_hat=float(v_hat),
        v_theory=theoretical_rate(params) if params is not None else None,
        window=(float(tt[0]), float(tt[-1])),
        r2=float(r2),
        exponent=float(exponent),
        v_hat_plain=float(plain[1]),
    )

"""Event-driven simulation of the finite network of N stations.

Every station holds ``r`` reservations and ``v`` parked cars (Model 2 has no
reservations and a pool of cars in transit instead). Events are drawn from the
aggregate rate and the acting station is picked in O(1): parked cars are
chosen from the list of stations with ``v > 0`` and reservation completions
from a list holding one token per reservation, both maintained with
swap-removal.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .core import JointDist, Model, ModelParams, TruncationGrid

_BUFFER = 3 * 65536


class InvalidStateError(ValueError):
    pass


class InitKind(enum.Enum):
    ALL_RESERVED = "AllReserved"
    ALL_CARS = "AllCars"
    UNIFORM = "Uniform"

    @classmethod
    def parse(cls, value) -> "InitKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value in (kind.value, kind.name, kind.name.lower(), kind.value.lower()):
                return kind
        raise ValueError(f"unknown initial state kind {value!r}")


@dataclass(frozen=True, eq=False)
class NetworkState:
    r: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    in_transit: int = 0
    clock: float = 0.0

    def __post_init__(self):
        r = np.array(self.r, dtype=np.int64)
        v = np.array(self.v, dtype=np.int64)
        if r.shape != v.shape or r.ndim != 1 or r.size == 0:
            raise InvalidStateError("r and v must be non-empty vectors of equal length")
        if np.any(r < 0) or np.any(v < 0) or self.in_transit < 0:
            raise InvalidStateError("negative occupancy")
        r.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "in_transit", int(self.in_transit))

    @property
    def n_stations(self) -> int:
        return self.r.size

    @property
    def fleet_size(self) -> int:
        return int(self.r.sum() + self.v.sum() + self.in_transit)

    def validate(self, params: ModelParams, fleet_size: int | None = None) -> None:
        model = params.model
        if model is Model.NO_RESERVATION_FINITE:
            if np.any(self.r != 0):
                raise InvalidStateError("Model 2 has no reservations")
            if np.any(self.v > params.capacity):
                raise InvalidStateError("a station holds more cars than its capacity")
        else:
            if self.in_transit != 0:
                raise InvalidStateError("cars in transit only exist in Model 2")
            if model is Model.RESERVATION_FINITE and np.any(self.r + self.v > params.capacity):
                raise InvalidStateError("a station exceeds its capacity")
        if fleet_size is not None and self.fleet_size != fleet_size:
            raise InvalidStateError(f"fleet size {self.fleet_size}, expected {fleet_size}")


@dataclass(frozen=True)
class SimConfig:
    n_stations: int
    fleet_size: int
    horizon: float
    sample_times: tuple[float, ...]
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        ts = tuple(float(t) for t in self.sample_times)
        object.__setattr__(self, "sample_times", ts)
        if self.n_stations < 1 or self.fleet_size < 0 or self.replications < 1:
            raise ValueError("need n_stations >= 1, fleet_size >= 0, replications >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("sample_times must be sorted")
        if ts and (ts[0] < 0 or ts[-1] > self.horizon):
            raise ValueError("sample_times must lie in [0, horizon]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def check(self, params: ModelParams) -> None:
        if params.finite and self.fleet_size > params.capacity * self.n_stations:
            raise ValueError(f"{self.fleet_size} cars do not fit in {self.n_stations} stations of capacity {params.capacity}")

    @classmethod
    def for_density(cls, n_stations: int, density: float, horizon: float, sample_times=None, **kw) -> "SimConfig":
        if sample_times is None:
            sample_times = (horizon,)
        return cls(n_stations, int(round(density * n_stations)), horizon, tuple(sample_times), **kw)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    time: float
    counts: JointDist
    n_stations: int

    @property
    def b(self) -> float:
        """Fraction of stations with at least one parked car."""
        return 1.0 - float(self.counts.mass[:, 0].sum())

    @property
    def mean_cars(self) -> float:
        return float(np.arange(self.counts.grid.k_max + 1) @ self.counts.marginal_cars())


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Independent stream for ``(seed, replication)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(replication)])))


# ---------------------------------------------------------------- engine

_MODEL_CODE = {
    Model.RESERVATION_INFINITE: 1,
    Model.NO_RESERVATION_FINITE: 2,
    Model.RESERVATION_FINITE: 3,
}


@njit(cache=True, nogil=True)
def _add_car(i, cars, carpos, counts):
    carpos[i] = counts[0]
    cars[counts[0]] = i
    counts[0] += 1


@njit(cache=True, nogil=True)
def _drop_car(i, cars, carpos, counts):
    k = carpos[i]
    last = cars[counts[0] - 1]
    cars[k] = last
    carpos[last] = k
    carpos[i] = -1
    counts[0] -= 1


@njit(cache=True, nogil=True)
def _advance(r, v, cars, carpos, tok, counts, times, lam, mu, K, model, routing, buf, pos, t_stop, max_events):
    """Run events up to ``t_stop``; returns (buffer position, events applied).

    ``counts`` = (stations with cars, reservation tokens, cars in transit),
    ``times`` = (clock, time of the already drawn next event or -1). Returns
    early when the buffer runs dry or ``max_events`` events were applied.
    """
    N = r.size
    nbuf = buf.size
    done = 0
    while done < max_events:
        if model == 2:
            R = lam * counts[0] + mu * counts[2]
        else:
            R = lam * counts[0] + mu * counts[1]
        if times[1] < 0.0:
            if R <= 0.0:
                times[0] = max(times[0], t_stop)
                return pos, done
            if pos >= nbuf:
                return pos, done
            times[1] = times[0] - math.log(1.0 - buf[pos]) / R
            pos += 1
        if times[1] > t_stop:
            times[0] = max(times[0], t_stop)
            return pos, done
        if pos + 2 > nbuf:
            return pos, done
        times[0] = times[1]
        times[1] = -1.0
        x = buf[pos] * R
        u = buf[pos + 1]
        pos += 2
        done += 1
        car_rate = lam * counts[0]
        dest = routing[min(int(u * N), N - 1)]
        if x < car_rate:
            i = cars[min(int(x / lam), counts[0] - 1)]
            if model == 2:
                v[i] -= 1
                if v[i] == 0:
                    _drop_car(i, cars, carpos, counts)
                counts[2] += 1
            elif model == 3 and r[dest] + v[dest] >= K:
                pass
            else:
                v[i] -= 1
                if v[i] == 0:
                    _drop_car(i, cars, carpos, counts)
                r[dest] += 1
                tok[counts[1]] = dest
                counts[1] += 1
        elif model == 2:
            if v[dest] < K:
                if v[dest] == 0:
                    _add_car(dest, cars, carpos, counts)
                v[dest] += 1
                counts[2] -= 1
        else:
            k = min(int((x - car_rate) / mu), counts[1] - 1)
            j = tok[k]
            tok[k] = tok[counts[1] - 1]
            counts[1] -= 1
            r[j] -= 1
            if v[j] == 0:
                _add_car(j, cars, carpos, counts)
            v[j] += 1
    return pos, done


class _Engine:
    """Mutable simulation state with the O(1) selection structures."""

    def __init__(self, state: NetworkState, params: ModelParams, rng: np.random.Generator, order=None, routing=None):
        N = state.n_stations
        self.params = params
        self.model = _MODEL_CODE[params.model]
        self.K = params.capacity if params.finite else 0
        self.r = state.r.copy()
        self.v = state.v.copy()
        self.fleet = state.fleet_size
        order = np.arange(N) if order is None else np.asarray(order, dtype=np.int64)
        self.routing = np.arange(N, dtype=np.int64) if routing is None else np.asarray(routing, dtype=np.int64)
        self.cars = np.zeros(N, dtype=np.int64)
        self.carpos = np.full(N, -1, dtype=np.int64)
        self.tok = np.zeros(max(self.fleet, 1), dtype=np.int64)
        self.counts = np.zeros(3, dtype=np.int64)
        self.counts[2] = state.in_transit
        for i in order:
            if self.v[i] > 0:
                _add_car(i, self.cars, self.carpos, self.counts)
            for _ in range(self.r[i]):
                self.tok[self.counts[1]] = i
                self.counts[1] += 1
        self.times = np.array([state.clock, -1.0])
        self.rng = rng
        self.buf = np.empty(0)
        self.pos = 0

    @property
    def clock(self) -> float:
        return float(self.times[0])

    def _refill(self):
        rest = self.buf[self.pos :]
        self.buf = np.concatenate([rest, self.rng.random(_BUFFER)])
        self.pos = 0

    def advance(self, t_stop: float, max_events: int = 2**62) -> int:
        """Apply events up to ``t_stop`` (at most ``max_events``); returns the count."""
        p = self.params
        applied = 0
        while applied < max_events:
            self.pos, n = _advance(
                self.r, self.v, self.cars, self.carpos, self.tok, self.counts, self.times,
                p.lam, p.mu, self.K, self.model, self.routing, self.buf, self.pos, t_stop,
                max_events - applied,
            )
            applied += n
            if self.times[0] >= t_stop or applied >= max_events:
                break
            self._refill()
        return applied

    def state(self) -> NetworkState:
        return NetworkState(self.r.copy(), self.v.copy(), int(self.counts[2]), self.clock)

    def measure(self, grid: TruncationGrid | None = None) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.clock, tally(self.r, self.v, self.params, grid), self.r.size)


def tally(r, v, params: ModelParams, grid: TruncationGrid | None = None) -> JointDist:
    """Empirical measure ``alpha_{j,k}`` of the station pairs."""
    N = len(r)
    if grid is None:
        if params.model is Model.RESERVATION_FINITE:
            grid = TruncationGrid.for_capacity(params.capacity)
        elif params.model is Model.NO_RESERVATION_FINITE:
            grid = TruncationGrid(0, params.capacity)
        else:
            grid = TruncationGrid(max(int(np.max(r)), 1), max(int(np.max(v)), 1))
    if np.max(r) > grid.j_max or np.max(v) > grid.k_max:
        raise ValueError("station occupancy falls outside the requested grid")
    counts = np.zeros(grid.shape)
    np.add.at(counts, (np.asarray(r), np.asarray(v)), 1.0)
    return JointDist(grid, counts / N)


def step(state: NetworkState, params: ModelParams, rng: np.random.Generator) -> NetworkState:
    """Advance by exactly one event (blocked moves count as events)."""
    state.validate(params)
    eng = _Engine(state, params, rng)
    eng.buf = rng.random(3)
    if eng.advance(math.inf, max_events=1) == 0:
        raise InvalidStateError("no event is enabled in this state")
    out = eng.state()
    out.validate(params, state.fleet_size)
    return out


def initial_state(kind, config: SimConfig, params: ModelParams, rng: np.random.Generator) -> NetworkState:
    """Initial configuration of ``config.fleet_size`` particles.

    ``AllReserved`` and ``AllCars`` drop particles one at a time on uniformly
    chosen stations that still have room; ``Uniform`` deals cars round-robin.
    """
    kind = InitKind.parse(kind)
    config.check(params)
    N, M = config.n_stations, config.fleet_size
    if kind is InitKind.ALL_RESERVED and params.model is Model.NO_RESERVATION_FINITE:
        raise ValueError("Model 2 has no reservations")
    if kind is InitKind.UNIFORM:
        occ = np.bincount(np.arange(M) % N, minlength=N)
    elif not params.finite:
        occ = np.bincount(rng.integers(0, N, size=M), minlength=N)
    else:
        occ = np.zeros(N, dtype=np.int64)
        free = list(range(N))
        for _ in range(M):
            k = int(rng.integers(0, len(free)))
            i = free[k]
            occ[i] += 1
            if occ[i] == params.capacity:
                free[k] = free[-1]
                free.pop()
    zero = np.zeros(N, dtype=np.int64)
    if kind is InitKind.ALL_RESERVED:
        state = NetworkState(occ, zero)
    else:
        state = NetworkState(zero, occ)
    state.validate(params, M)
    return state


def _one_replication(config, params, init, rep, grid):
    rng = replication_rng(config.seed, rep)
    if callable(init):
        state = init(config, params, rng)
    else:
        state = initial_state(init, config, params, rng)
    state.validate(params, config.fleet_size)
    eng = _Engine(state, params, rng)
    out = []
    for t in config.sample_times:
        eng.advance(t)
        out.append(eng.measure(grid))
    fin = eng.state()
    fin.validate(params, config.fleet_size)
    return out


def run(
    config: SimConfig,
    params: ModelParams,
    init: str | InitKind | Callable = InitKind.ALL_CARS,
    grid: TruncationGrid | None = None,
    workers: int = 1,
) -> list[list[EmpiricalMeasure]]:
    """Empirical measures at ``config.sample_times`` for every replication.

    Replication ``i`` draws from the stream ``(config.seed, i)`` only, so the
    output does not depend on ``workers``.
    """
    config.check(params)
    reps = range(config.replications)
    if workers <= 1:
        return [_one_replication(config, params, init, i, grid) for i in reps]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: _one_replication(config, params, init, i, grid), reps))


def mean_measure(measures: list[EmpiricalMeasure]) -> JointDist:
    """Average of empirical measures on the smallest grid holding them all."""
    grids = [m.counts.grid for m in measures]
    caps = {g.joint_cap for g in grids}
    grid = TruncationGrid(max(g.j_max for g in grids), max(g.k_max for g in grids), caps.pop() if len(caps) == 1 else None)
    total = sum(m.counts.regrid(grid).mass for m in measures)
    return JointDist.normalized(grid, total / len(measures))


def write_csv(measures: list[EmpiricalMeasure], path) -> None:
    """Non-zero cells as rows ``t, j, k, alpha``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "j", "k", "alpha"])
        for m in measures:
            for j, k in zip(*np.nonzero(m.counts.mass)):
                w.writerow([repr(m.time), int(j), int(k), repr(float(m.counts.mass[j, k]))])

import math

import numpy as np
import pytest

from carshare import ModelParams
from carshare.particles import (
    InitKind,
    InvalidStateError,
    NetworkState,
    SimConfig,
    _Engine,
    initial_state,
    mean_measure,
    replication_rng,
    run,
    step,
    write_csv,
)

BETA = (3 - math.sqrt(5)) / 2
M2_K1 = ModelParams(1, 1, 1, 1, "model2")


def test_single_station_self_loop(unit_params, rng):
    out = step(NetworkState([0], [1]), unit_params, rng)
    assert (out.r.tolist(), out.v.tolist()) == ([1], [0])
    assert out.clock > 0


def test_model3_blocking():
    p = ModelParams(1, 1, 0.5, 1, "model3")
    state = NetworkState([0, 1], [1, 0])
    eng = _Engine(state, p, replication_rng(0, 0))
    # exponential draw, then a car-departure draw, then destination = station 2
    eng.buf = np.array([0.5, 0.0, 0.99])
    assert eng.advance(math.inf, max_events=1) == 1
    out = eng.state()
    assert out.r.tolist() == [0, 1] and out.v.tolist() == [1, 0]
    assert out.clock > 0


def test_two_state_chain_time_fraction(unit_params, rng):
    state = NetworkState([1], [0])
    in_car, horizon = 0.0, 1e4
    while state.clock < horizon:
        nxt = step(state, unit_params, rng)
        if state.v[0] == 1:
            in_car += min(nxt.clock, horizon) - state.clock
        state = nxt
    assert in_car / horizon == pytest.approx(0.5, abs=0.01)


def test_step_rejects_dead_and_invalid_states(unit_params, rng):
    with pytest.raises(InvalidStateError):
        step(NetworkState([0, 0], [0, 0]), unit_params, rng)
    with pytest.raises(InvalidStateError):
        step(NetworkState([1], [1]), ModelParams(1, 1, 1, 1, "model3"), rng)
    with pytest.raises(InvalidStateError):
        NetworkState([-1], [0])


def test_initial_state_examples(unit_params, rng):
    cfg = SimConfig(4, 4, 1.0, (1.0,))
    s = initial_state("Uniform", cfg, unit_params, rng)
    assert s.r.tolist() == [0] * 4 and s.v.tolist() == [1] * 4
    s = initial_state(InitKind.ALL_RESERVED, SimConfig(2, 3, 1.0, ()), unit_params, rng)
    assert s.r.sum() == 3 and s.v.sum() == 0
    with pytest.raises(ValueError):
        initial_state("AllCars", SimConfig(2, 3, 1.0, ()), ModelParams(1, 1, 1, 1, "model3"), rng)
    with pytest.raises(ValueError):
        initial_state("AllReserved", SimConfig(2, 1, 1.0, ()), M2_K1, rng)
    s = initial_state("AllCars", SimConfig(5, 9, 1.0, ()), ModelParams(1, 1, 1.8, 2, "model3"), rng)
    assert s.v.max() <= 2 and s.v.sum() == 9


def test_run_horizon_zero(unit_params):
    cfg = SimConfig(10, 10, 0.0, (0.0,), seed=3)
    (meas,) = run(cfg, unit_params, init="Uniform")
    m = meas[0]
    assert m.time == 0.0 and m.counts.mass[0, 1] == 1.0


def test_model1_mean_field_b(unit_params):
    cfg = SimConfig.for_density(2000, 1.0, 50.0, seed=11, replications=20)
    reps = run(cfg, unit_params, init="Uniform")
    b = np.mean([r[-1].b for r in reps])
    assert b == pytest.approx(BETA, abs=0.02)


def test_model2_mean_cars():
    cfg = SimConfig.for_density(1000, 1.0, 50.0, seed=5, replications=5)
    reps = run(cfg, M2_K1, init="AllCars")
    cars = np.mean([r[-1].mean_cars for r in reps])
    assert cars == pytest.approx(BETA, abs=0.02)


@pytest.mark.parametrize("params", [ModelParams(1.3, 0.7, 1.5), ModelParams(1, 2, 1.5, 3, "model3"), ModelParams(1, 1, 1.2, 2, "model2")])
def test_conservation_and_capacity(params):
    rng = replication_rng(9, 0)
    M = int(round(params.fleet_density * 50))
    state = initial_state("AllCars", SimConfig(50, M, 1.0, ()), params, rng)
    eng = _Engine(state, params, rng)
    for k in range(200):
        eng.advance(math.inf, max_events=25)
        s = eng.state()
        s.validate(params, M)
        assert s.fleet_size == M


def test_exchangeability(unit_params):
    N = 12
    rng0 = replication_rng(1, 0)
    base = initial_state("AllReserved", SimConfig(N, 20, 1.0, ()), unit_params, rng0)
    perm = np.random.default_rng(7).permutation(N)
    r2 = np.empty(N, dtype=np.int64)
    v2 = np.empty(N, dtype=np.int64)
    r2[perm], v2[perm] = base.r, base.v
    a = _Engine(base, unit_params, replication_rng(2, 0))
    b = _Engine(NetworkState(r2, v2), unit_params, replication_rng(2, 0), order=perm, routing=perm)
    for t in np.linspace(0.5, 10, 20):
        a.advance(t)
        b.advance(t)
        sa, sb = a.state(), b.state()
        assert np.array_equal(sb.r[perm], sa.r) and np.array_equal(sb.v[perm], sa.v)
        assert sa.clock == sb.clock


def test_determinism_across_workers(unit_params, tmp_path):
    cfg = SimConfig.for_density(200, 1.0, 5.0, sample_times=(1.0, 5.0), seed=42, replications=4)
    one = run(cfg, unit_params, init="AllReserved")
    four = run(cfg, unit_params, init="AllReserved", workers=4)
    for ra, rb in zip(one, four):
        for ma, mb in zip(ra, rb):
            assert ma.time == mb.time and np.array_equal(ma.counts.mass, mb.counts.mass)
    write_csv(one[0], tmp_path / "a.csv")
    write_csv(four[0], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    avg = mean_measure([r[-1] for r in one])
    assert abs(avg.mass.sum() - 1) < 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(10, 5, 1.0, (2.0,))
    with pytest.raises(ValueError):
        SimConfig(10, 5, 1.0, (0.5, 0.2))
    with pytest.raises(ValueError):
        SimConfig(0, 5, 1.0, ())

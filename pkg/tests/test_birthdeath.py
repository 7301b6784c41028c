import math

import numpy as np
import pytest

from carshare.birthdeath import (
    ArrivalProfile,
    BDState,
    TailMassError,
    default_n_max,
    dominance_check,
    evolve,
    geometric_law,
    lipschitz_probe,
    stationary_equivalence,
)
from carshare.volterra import estimate_rate

T = np.linspace(0, 20, 201)


def test_state_validation():
    with pytest.raises(ValueError):
        BDState(np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        BDState(np.array([1.1, -0.1]))
    s = BDState.point(2, 5)
    assert s.n_max == 4 and s.empty == 0.0
    np.testing.assert_array_equal(s.s, [0, 0, 1, 1, 1])
    with pytest.raises(ValueError):
        s.padded(1)


def test_profile_table_and_errors():
    prof = ArrivalProfile(times=[0, 1, 2], values=[0, 1, 1])
    assert prof(0.5) == 0.5 and prof(5.0) == 1.0 and prof.limit == 1.0
    with pytest.raises(ValueError):
        ArrivalProfile(times=[0, 1], values=[1, -1])
    with pytest.raises(ValueError):
        ArrivalProfile(lambda t: 1.0, times=[0, 1], values=[1, 1])
    with pytest.raises(ValueError):
        ArrivalProfile(lambda t: -1.0)(0.0)


def test_evolve_empty_stays_empty():
    states = evolve(BDState.point(0), ArrivalProfile.constant(0.0), 1.0, T)
    for s in states:
        assert s.empty == pytest.approx(1.0, abs=1e-15)


def test_evolve_pure_death():
    sigma = 1.7
    states = evolve(BDState.point(1), ArrivalProfile.constant(0.0), sigma, T)
    np.testing.assert_allclose([s.empty for s in states], 1 - np.exp(-sigma * T), atol=1e-9)


def test_evolve_stationary_empty_probability():
    states = evolve(BDState.point(0), ArrivalProfile.constant(0.3), 1.0, np.linspace(0, 200, 11))
    assert states[-1].empty == pytest.approx(0.7, abs=1e-8)


def test_evolve_positivity_and_conservation(rng):
    for _ in range(10):
        a, w, c = rng.uniform(0.1, 0.8), rng.uniform(0.1, 3), rng.uniform(0, 0.15)
        prof = ArrivalProfile(lambda t, a=a, w=w, c=c: a + c * math.sin(w * t))
        init = BDState.from_probs(rng.random(int(rng.integers(1, 8))))
        for s in evolve(init, prof, 1.0, T):
            assert s.p.min() >= -1e-12
            assert abs(s.p.sum() - 1.0) < 1e-10


def test_evolve_tail_handling():
    assert default_n_max(0.5, 1.0) == 30
    assert default_n_max(2.0, 1.0) == 200
    with pytest.raises(TailMassError):
        evolve(BDState.point(0), ArrivalProfile.constant(3.0), 1.0, np.linspace(0, 500, 3), n_max=10, max_doublings=2)


def test_dominance_examples():
    empty = BDState.point(0)
    same = ArrivalProfile.constant(0.4)
    rep = dominance_check(same, same, empty, empty, 1.0, T)
    assert abs(rep.worst_gap) < 1e-12
    rep = dominance_check(ArrivalProfile.constant(0.3), ArrivalProfile.constant(0.6), empty, empty, 1.0, np.linspace(0, 20, 200))
    assert rep.holds and rep.worst_empty_gap <= 1e-9
    ramp = ArrivalProfile(lambda t: 0.5 * (1 - math.exp(-t)))
    assert dominance_check(ramp, ArrivalProfile.constant(0.5), empty, empty, 1.0, T).holds


def test_dominance_rejects_bad_inputs():
    empty = BDState.point(0)
    with pytest.raises(ValueError):
        dominance_check(ArrivalProfile.constant(0.6), ArrivalProfile.constant(0.3), empty, empty, 1.0, T)
    with pytest.raises(ValueError):
        dominance_check(ArrivalProfile.constant(0.3), ArrivalProfile.constant(0.6), BDState.point(2), empty, 1.0, T)


def test_lipschitz_probe():
    empty = BDState.point(0)
    with pytest.raises(ValueError):
        lipschitz_probe(ArrivalProfile.constant(0.4), ArrivalProfile.constant(0.4), empty, 1.0, T)
    ratios = []
    for n in (101, 201, 401):
        t = np.linspace(0, 20, n)
        ratios.append(lipschitz_probe(ArrivalProfile.constant(0.4), ArrivalProfile.constant(0.5), empty, 1.0, t).ratio)
    assert np.all(np.isfinite(ratios))
    assert abs(ratios[-1] - ratios[-2]) < 1e-3 * ratios[-1]


def test_stationary_equivalence():
    rep = stationary_equivalence(ArrivalProfile.constant(0.3), 1.0, 50 / (1 - math.sqrt(0.3)) ** 2)
    assert rep.l1 < 1e-4 and rep.ratio == pytest.approx(0.3)
    beta = (3 - math.sqrt(5)) / 2
    ramp = ArrivalProfile(lambda t: beta * (1 - math.exp(-t)), limit=beta)
    rep = stationary_equivalence(ramp, 1.0, 50 / (1 - math.sqrt(beta)) ** 2)
    assert rep.l1 < 1e-4
    rep = stationary_equivalence(ArrivalProfile.constant(0.0), 1.0, 10.0)
    assert rep.l1 < 1e-12
    with pytest.raises(ValueError):
        stationary_equivalence(ArrivalProfile.constant(1.2), 1.0, 10.0)
    np.testing.assert_allclose(geometric_law(0.0, 3), [1, 0, 0, 0])


def test_exponential_relaxation():
    gamma, serv = 0.3, 1.0
    t = np.linspace(0, 150, 1501)
    states = evolve(BDState.point(0), ArrivalProfile.constant(gamma), serv, t, rtol=1e-12, atol=1e-16)
    est = estimate_rate(t, [s.empty for s in states], 1 - gamma / serv, tol=1e-12)
    target = (math.sqrt(serv) - math.sqrt(gamma)) ** 2
    assert abs(est.v_hat - target) < 0.2 * target

import math

import numpy as np
import pytest

from carshare import ModelParams
from carshare.bessel import bessel_I, bessel_I_orders
from carshare.birthdeath import ArrivalProfile, BDState, evolve
from carshare.equilibrium import beta_model1, delta_bar
from carshare.volterra import (
    MonotonicityError,
    RateFunction,
    estimate_rate,
    geometric_cars,
    kernel_D,
    kernel_matrix,
    lower_scheme,
    psi_forcing,
    solve_delta_system,
    solve_H,
    theoretical_rate,
    upper_scheme,
)

from oracles import I0E_AT_1, KERNEL_L1_T1_A1, bessel_series, poisson, skellam_kernel


# ---------------------------------------------------------------- Bessel


def test_bessel_examples():
    assert bessel_I(0, 0.0) == 1.0
    assert bessel_I(1, 0.0) == 0.0
    assert bessel_I(0, 1.0) == pytest.approx(I0E_AT_1, rel=1e-14)
    with pytest.raises(ValueError):
        bessel_I(2, 1.0)
    with pytest.raises(ValueError):
        bessel_I(0, -1.0)


@pytest.mark.parametrize("x", [0.01, 0.5, 2.0, 7.5, 14.9, 15.1, 30.0])
def test_bessel_against_series(x):
    for n in (0, 1):
        assert bessel_I(n, x) == pytest.approx(bessel_series(n, x, terms=120), rel=1e-12)


def test_bessel_against_mpmath():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    for x in (16.0, 40.0, 150.0, 1e3, 1e5):
        for n in (0, 1):
            ref = float(mp.exp(-x) * mp.besseli(n, x))
            assert bessel_I(n, x) == pytest.approx(ref, rel=1e-12)


def test_bessel_orders_recurrence():
    x = 3.7
    orders = bessel_I_orders(5, x)
    for n in range(6):
        assert orders[n] == pytest.approx(bessel_series(n, x, terms=120), rel=1e-11)


# ---------------------------------------------------------------- kernel and forcing


def test_kernel_examples():
    zero = lambda t: 0.0
    for lam, tau in [(1.0, 0.3), (2.5, 4.0)]:
        assert kernel_D(0.0, tau, lam, zero) == pytest.approx(math.exp(-lam * tau), rel=1e-15)
    assert kernel_D(2.0, 2.0, 1.0, lambda t: t) == 1.0
    assert kernel_D(0.0, 1.0, 1.0, lambda t: t) == pytest.approx(KERNEL_L1_T1_A1, rel=1e-13)
    with pytest.raises(ValueError):
        kernel_D(1.0, 0.5, 1.0, zero)


def test_kernel_against_walk_oracle(rng):
    tau = rng.uniform(0.01, 8, 20)
    dA = rng.uniform(0, 8, 20)
    lam = 1.3
    got = kernel_matrix(tau, dA, lam)
    want = [skellam_kernel(t, a, lam) for t, a in zip(tau, dA)]
    np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-15)


def test_psi_examples():
    t = np.linspace(0, 3, 7)
    np.testing.assert_allclose(psi_forcing([1.0], 1.0, np.zeros_like(t), t), np.exp(-t), rtol=1e-14)
    assert psi_forcing([1.0], 1.0, [0.0], [1.0])[0] == pytest.approx(0.3678794, abs=1e-7)
    P = np.array([0.3, 0.5, 0.2])
    assert psi_forcing(P, 2.0, [0.0], [0.0])[0] == pytest.approx(0.3)
    # P(N0 + Y - X = 0) by direct summation
    u, a = 1.7, 0.9
    ref = sum(
        P[m] * poisson(a, y) * poisson(u, m + y) for m in range(3) for y in range(80)
    )
    assert psi_forcing(P, 1.0, [a], [u])[0] == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        psi_forcing([0.5, 0.4], 1.0, [0.0], [0.0])


# ---------------------------------------------------------------- Volterra solver


def test_solve_H_no_arrivals():
    sol = solve_H(RateFunction.constant(0.0, 20.0, 0.05), 1.0)
    np.testing.assert_allclose(sol.H, 1.0, atol=1e-14)
    np.testing.assert_allclose(sol.psi, np.exp(-sol.times), rtol=1e-13)


@pytest.mark.parametrize("gamma", [0.3, 0.5, 0.9])
def test_solve_H_constant_rate(gamma):
    sol = solve_H(RateFunction.constant(gamma, 60.0, 0.02), 1.0, richardson=True)
    assert np.all(sol.H >= 1 - gamma - 1e-9)
    assert np.all((sol.H >= 0) & (sol.H <= 1 + 1e-12))
    if gamma <= 0.5:
        assert sol.H[-1] == pytest.approx(1 - gamma, abs=2e-4)


def test_solve_H_half_load_against_forward_equations():
    t = np.linspace(0, 40, 201)
    queue = evolve(BDState.point(0), ArrivalProfile.constant(0.5), 1.0, t)
    sol = solve_H(RateFunction.constant(0.5, 40.0, 0.02), 1.0, richardson=True)
    # relaxation at rate (1 - sqrt(0.5))**2 ~ 0.086 leaves ~2.6e-4 at t = 40
    np.testing.assert_allclose(sol.H[::5], [q.empty for q in queue], atol=1e-8)
    assert sol.H[-1] == pytest.approx(0.5, abs=5e-4)


def test_solve_H_second_order():
    errs = []
    ref = solve_H(RateFunction.constant(0.4, 8.0, 0.0025), 1.0, richardson=True).H[-1]
    for h in (0.08, 0.04, 0.02):
        errs.append(abs(solve_H(RateFunction.constant(0.4, 8.0, h), 1.0).H[-1] - ref))
    assert errs[0] / errs[1] > 3 and errs[1] / errs[2] > 3


def test_solve_H_forms_agree():
    rate = RateFunction.constant(0.3, 10.0, 0.01)
    a = solve_H(rate, 1.0, init_cars=[0.5, 0.5])
    b = solve_H(rate, 1.0, init_cars=[0.5, 0.5], form="direct", max_defect=1.0)
    np.testing.assert_allclose(a.H, b.H, atol=1e-4)
    assert a.H[0] == 0.5
    with pytest.raises(ValueError):
        solve_H(rate, 1.0, form="other")


def test_exponential_averaging():
    """int_0^t mu exp(mu (s - t)) c ds -> c, through the scheme update with H = 1 - c/lam."""
    from carshare.volterra import _next_iterate

    lam, mu, h, c = 1.0, 0.7, 0.01, 0.4
    H = np.full(4001, 1 - c / lam)
    out = np.empty_like(H)
    _next_iterate(lam, mu, h, H, out)
    t = h * np.arange(H.size)
    np.testing.assert_allclose(out[1:], c * (1 - np.exp(-mu * t[1:])), rtol=1e-5)
    assert out[-1] == pytest.approx(c, abs=(mu * h) ** 2 * c / 12 + 1e-12)


# ---------------------------------------------------------------- coupled system


def test_delta_system_start_and_bound(unit_params):
    rate, sol = solve_delta_system(unit_params, [0.0, 1.0], 20.0)
    d, t = rate.values, rate.times
    assert d[0] == 0.0 and sol.H[0] == 0.0
    assert np.all(d <= unit_params.lam * (1 - np.exp(-unit_params.mu * t)) + 1e-9)
    assert np.all((sol.H >= -1e-12) & (sol.H <= 1 + 1e-12))


def test_delta_system_empty_start(unit_params):
    rate, sol = solve_delta_system(unit_params, [1.0], 10.0, check_mass=False)
    d, h = rate.values, rate.h
    assert d[0] == 0.0
    assert d[1] / h < 1e-2  # delta'(0) = lam mu (1 - H(0)) = 0
    assert sol.H[0] == 1.0


def test_delta_system_limit():
    p = ModelParams(2, 1, 3)
    horizon = 12.5 / theoretical_rate(p)
    rate, _ = solve_delta_system(p, geometric_cars(3 / 4), horizon, h=0.05, check_mass=False)
    assert rate.values[-1] == pytest.approx(delta_bar(p), abs=5e-5)


def test_delta_system_rejects_wrong_density(unit_params):
    with pytest.raises(ValueError):
        solve_delta_system(unit_params, [0.0, 0.0, 1.0], 1.0)


def test_lower_and_upper_schemes(unit_params):
    P = geometric_cars(0.5)
    lo = lower_scheme(unit_params, P, 5.0, 0.02)
    up = upper_scheme(unit_params, 0.6, P, 5.0, 0.02)
    assert np.all(up[0].values == 0.6)
    assert np.all(lo[0].values == 0.0)
    t = up[1].times
    assert np.all(up[1].values <= 0.6 * (1 - np.exp(-t)) + 1e-12)
    for a, b in zip(lo, lo[1:]):
        assert np.all(b.values >= a.values - 1e-12)
    for a, b in zip(up, up[1:]):
        assert np.all(b.values <= a.values + 1e-12)
    assert np.all(lo[-1].values <= up[-1].values + 1e-12)
    assert np.max(np.abs(lo[-1].values - up[-1].values)) < 1e-8
    march, _ = solve_delta_system(unit_params, P, 5.0, h=0.02, richardson=False, check_mass=False)
    assert np.max(np.abs(march.values - lo[-1].values)) < 1e-9


def test_upper_scheme_from_delta_bar(unit_params):
    P = geometric_cars(0.5)
    up = upper_scheme(unit_params, delta_bar(unit_params), P, 5.0, 0.02, check_monotone=False)
    march, _ = solve_delta_system(unit_params, P, 5.0, h=0.02, richardson=False, check_mass=False)
    assert np.max(np.abs(march.values - up[-1].values)) < 1e-8


def test_upper_scheme_detects_bad_start(unit_params):
    with pytest.raises(ValueError):
        upper_scheme(unit_params, 1.5, [1.0], 1.0, 0.05)
    with pytest.raises(MonotonicityError):
        # a full car queue drains slower than the constant-rate stationary one
        upper_scheme(unit_params, 0.2, geometric_cars(0.9), 3.0, 0.05)


# ---------------------------------------------------------------- rates


def test_theoretical_rate():
    assert theoretical_rate(ModelParams(1, 1, 1)) == pytest.approx((1 - (math.sqrt(5) - 1) / 2) ** 2, abs=1e-12)
    assert theoretical_rate(ModelParams(1, 0.05, 1)) == 0.05
    p = ModelParams(2, 1, 3)
    beta = beta_model1(p)
    assert theoretical_rate(p) == pytest.approx(min(1, 2 * (1 - math.sqrt(beta)) ** 2), abs=1e-12)


def test_estimate_rate_synthetic():
    t = np.linspace(0, 80, 2001)
    est = estimate_rate(t, 0.4 + np.exp(-0.3 * t), 0.4, prefactor="none")
    assert est.v_hat == pytest.approx(0.3, abs=1e-3)
    assert est.r2 > 0.999
    t = t[1:]
    est = estimate_rate(t, 0.4 + t ** -1.5 * np.exp(-0.3 * t), 0.4)
    assert est.v_hat == pytest.approx(0.3, abs=1e-3)
    assert est.exponent == pytest.approx(-1.5, abs=1e-2)
    with pytest.raises(ValueError):
        estimate_rate(t, np.full_like(t, 0.4), 0.4)

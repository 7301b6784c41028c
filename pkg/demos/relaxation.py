"""
How fast does a station forget its start?
=========================================

Integrate the mean-field system from an all-reserved start and fit the
exponential decay of b(t) - beta.
"""

import numpy as np

from carshare import ModelParams, Tolerances
from carshare.equilibrium import beta_model1
from carshare.meanfield import initial_dist, integrate
from carshare.volterra import estimate_rate, theoretical_rate

tight = Tolerances(ode_rel_tol=1e-12, ode_abs_tol=1e-16)

for params in [ModelParams(1, 1, 1), ModelParams(2, 1, 3), ModelParams(1, 0.05, 1)]:
    v = theoretical_rate(params)
    t = np.linspace(0, min(60 / v, 300), 2001)
    traj = integrate(initial_dist("AllReserved", params), t, params, tol=tight)
    est = estimate_rate(t, traj.series("b"), beta_model1(params), params=params)
    print(
        f"lam={params.lam:g} mu={params.mu:g} U={params.fleet_density:g}: "
        f"v={v:.4f} fitted={est.v_hat:.4f} (t^{est.exponent:+.2f} prefactor, R2={est.r2:.4f})"
    )

# With mu small the reservation mean is tied to the car queue by mass
# conservation, so b relaxes at the car-queue rate lam (1 - sqrt(beta))**2.
p = ModelParams(1, 0.05, 1)
print("car-queue rate for mu=0.05:", p.lam * (1 - beta_model1(p) ** 0.5) ** 2)

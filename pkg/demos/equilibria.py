"""
Stationary laws of the three station models
===========================================

Closed forms and fixed points, checked against a long mean-field run.
"""

import numpy as np

from carshare import ModelParams, TruncationGrid, dist_distance
from carshare.equilibrium import solve
from carshare.meanfield import initial_dist, integrate

# Unlimited capacity with reservations: beta has a closed form
m1 = ModelParams(lam=1.0, mu=1.0, fleet_density=1.0)
sol = solve(m1)
print(f"model 1  beta={sol.beta:.10f}  delta_bar={sol.delta_bar:.10f}")
print("  pi[:3,:3] =\n", np.round(sol.pi.mass[:3, :3], 6))

# Capacity K without reservations: a scalar fixed point
m2 = ModelParams(1.0, 1.0, 1.0, capacity=1, model="model2")
print(f"model 2  beta={solve(m2).beta:.12f}  (golden ratio conjugate {(5 ** 0.5 - 1) / 2:.12f})")

# Capacity K with reservations: two unknowns (rho_R, rho_V) and a constant Z
m3 = ModelParams(1.0, 2.0, 1.5, capacity=3, model="model3")
s3 = solve(m3)
print(f"model 3  rho_R={s3.rho_R:.10f}  rho_V={s3.rho_V:.10f}  Z={s3.Z:.6f}")

# The ODE forgets its start and lands on the same law
for params in (m1, m3):
    traj = integrate(initial_dist("AllReserved", params), np.linspace(0, 80, 81), params)
    end, pi = traj.final, solve(params).pi
    if not params.finite:
        grid = TruncationGrid(max(end.grid.j_max, pi.grid.j_max), max(end.grid.k_max, pi.grid.k_max))
        end, pi = end.regrid(grid), pi.regrid(grid)
    print(f"{params.model.value}: L1(ODE at t=80, pi) = {dist_distance(end, pi):.2e}")

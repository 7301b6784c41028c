"""
Finite networks approach the mean-field limit
=============================================

Simulate N stations exactly and compare the empirical station law with
the ODE solution at t = 10.
"""

import numpy as np

from carshare import ModelParams, TruncationGrid, dist_distance
from carshare.meanfield import initial_dist, integrate
from carshare.particles import SimConfig, mean_measure, run

params = ModelParams(1, 1, 1)
ode = integrate(initial_dist("Uniform", params), np.linspace(0, 10, 101), params).final

for N in (100, 1000, 10000):
    cfg = SimConfig.for_density(N, 1.0, 10.0, seed=1, replications=20)
    reps = run(cfg, params, init="Uniform", workers=4)
    emp = mean_measure([r[-1] for r in reps])
    grid = TruncationGrid(max(emp.grid.j_max, ode.grid.j_max), max(emp.grid.k_max, ode.grid.k_max))
    b = np.mean([r[-1].b for r in reps])
    print(f"N={N:6d}  L1 to ODE {dist_distance(emp.regrid(grid), ode.regrid(grid)):.4f}  b={b:.4f} (ODE {1 - ode.mass[:, 0].sum():.4f})")

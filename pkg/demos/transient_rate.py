"""
The reservation completion rate delta(t)
========================================

Solve the coupled Volterra / linear ODE system and compare with the
mean-field value mu * r(t).
"""

import numpy as np

from carshare import ModelParams
from carshare.equilibrium import delta_bar
from carshare.meanfield import initial_dist, integrate
from carshare.volterra import geometric_cars, lower_scheme, solve_delta_system, upper_scheme

params = ModelParams(1, 1, 1)

# every station starts with one parked car and no reservation
rate, vol = solve_delta_system(params, [0.0, 1.0], horizon=60.0)
traj = integrate(initial_dist("Uniform", params), rate.times, params)
print("sup |delta - mu r| =", np.max(np.abs(rate.values - params.mu * traj.series("r"))))
print("delta(60) =", rate.values[-1], " delta_bar =", delta_bar(params))
print("H(60) =", vol.H[-1], " 1 - delta_bar/lam =", 1 - delta_bar(params) / params.lam)

# The same limit squeezed from both sides by the monotone iterations
cars = geometric_cars(0.5)
lo = lower_scheme(params, cars, 5.0, 0.02)
up = upper_scheme(params, 0.6, cars, 5.0, 0.02)
for n in (1, 2, 4, 8):
    print(f"iterate {n}: lower delta(5)={lo[min(n, len(lo) - 1)].values[-1]:.8f}  upper={up[min(n, len(up) - 1)].values[-1]:.8f}")

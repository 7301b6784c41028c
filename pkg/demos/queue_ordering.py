"""
Ordering of queues with ordered arrival rates
=============================================

A smaller arrival profile keeps the queue stochastically smaller, and a
queue fed by a converging profile ends in the geometric law of the limit.
"""

import math

import numpy as np

from carshare.birthdeath import ArrivalProfile, BDState, dominance_check, lipschitz_probe, stationary_equivalence

t = np.linspace(0, 20, 201)
empty = BDState.point(0)

slow = ArrivalProfile(lambda s: 0.5 * (1 - math.exp(-s)))
fast = ArrivalProfile.constant(0.5)
rep = dominance_check(slow, fast, empty, empty, 1.0, t)
print(f"dominance gap {rep.worst_gap:.2e}, empty-probability gap {rep.worst_empty_gap:.2e}")

lip = lipschitz_probe(ArrivalProfile.constant(0.4), ArrivalProfile.constant(0.5), empty, 1.0, t)
print(f"Lipschitz ratio {lip.ratio:.3f}")

beta = (3 - math.sqrt(5)) / 2
ramp = ArrivalProfile(lambda s: beta * (1 - math.exp(-s)), limit=beta)
st = stationary_equivalence(ramp, 1.0, 50 / (1 - math.sqrt(beta)) ** 2)
print(f"L1 to geometric({st.ratio:.4f}) at t={st.horizon:.0f}: {st.l1:.2e}")

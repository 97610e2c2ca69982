"""
Asking for labels on a budget
=============================

The streaming sampler decides, one embedding at a time, whether a sample is
worth a human label.
"""

import numpy as np

from fedacross.numerics import make_rng
from fedacross.sampler import SamplerTelemetry, new_sampler_state, run_stream, selection_probability

# A stationary Gaussian stream in 8 dimensions. The controller nudges the
# base rate until the long-run selection rate matches the budget.
stream = make_rng(0).normal(size=(10_000, 8))
for budget in (0.05, 0.1, 0.3):
    state = new_sampler_state(8, budget=budget)
    tel = SamplerTelemetry()
    run_stream(state, stream, make_rng(1), tel)
    p = np.array([row[3] for row in tel.rows])
    late = np.mean([row[4] for row in tel.rows[5000:]])
    print(f"budget {budget:.2f}  selected {state.rate:.3f}  second half {late:.3f}  mean p {p.mean():.3f}")

# q itself is not smooth. The controller corrects it multiplicatively after
# every step, so it swings widely while the selection rate stays on target.

# Unusual samples get a higher probability than typical ones.
state = new_sampler_state(8, budget=0.1)
run_stream(state, stream[:2000], make_rng(2))
print("typical sample  p =", round(selection_probability(state, stream[0]), 3))
print("outlying sample p =", round(selection_probability(state, 6 * stream[0]), 3))

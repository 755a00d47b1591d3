"""How well does the state evolution predict a single VAMP run?

We take the simplest setting where everything can be written by hand: a
Gaussian signal, a design whose singular values are all one, and a little
additive noise. The recursion for the limiting mean squared error has a
closed form, so we print three columns side by side. They are the
hand-derived values, the library's state evolution, and the empirical error
of one solver run at a few problem sizes.

Run with ``python demos/gaussian_reference.py``; it takes a few seconds.
"""

import numpy as np

from mpforge.denoisers import ChannelSpec, PriorSpec
from mpforge.ensembles import SingularValueLaw
from mpforge.harness import ModelConfig
from mpforge.solvers import SolverConfig
from mpforge.state_evolution import gaussian_closed_form

K = 6
model = ModelConfig("vamp", PriorSpec.gaussian(1.0), ChannelSpec.awgn(0.01), SingularValueLaw.constant(1.0), 0.5,
                    solver=SolverConfig(max_iters=K, stop_change_eps=0.0))

oracle = gaussian_closed_form(1.0, 0.01, 1.0, 0.5, K)["mse_pred"]
se = model.state_evolution(K).mse_pred

runs = {}
for n in (256, 1024, 4096):
    inst = model.instance(n, "demo", seed=3)
    trace = model.solve(inst, model.solver, "demo", 3, False)
    runs[n] = [float(np.mean((x - inst.x0) ** 2)) for x in trace.x_hat]

print(f"{'k':>2} {'closed form':>12} {'SE':>12} " + " ".join(f"{'N=' + str(n):>10}" for n in runs))
for k in range(K + 1):
    print(f"{k:>2} {oracle[k]:12.6f} {se[k]:12.6f} " + " ".join(f"{runs[n][k]:10.6f}" for n in runs))

# The first two columns agree to rounding. The empirical columns scatter
# around them, and the scatter shrinks roughly like 1/sqrt(N).

"""Recovering a sparse signal from one-bit measurements.

Ten percent of the entries of x0 are nonzero. We observe sign(A x0 + w) with
a right-rotationally invariant A whose singular values are spread uniformly
on [0, 4]. GVAMP handles the nonlinear output through a probit denoiser,
and its state evolution still predicts the error.

The recursion for this problem oscillates with period two before settling.
The solver does the same, so the printed error is not monotone in k.
"""

import numpy as np

from mpforge.denoisers import ChannelSpec, PriorSpec
from mpforge.ensembles import SingularValueLaw
from mpforge.harness import ModelConfig
from mpforge.solvers import SolverConfig

K = 10
model = ModelConfig("gvamp", PriorSpec.bernoulli_gaussian(0.1), ChannelSpec.probit(0.01),
                    SingularValueLaw.uniform(4.0), 0.5, solver=SolverConfig(max_iters=K, stop_change_eps=0.0))
se = model.state_evolution(K)

trials = 20
errors = np.zeros((trials, K + 1))
for t in range(trials):
    inst = model.instance(2048, f"probit/{t}", seed=11)
    trace = model.solve(inst, model.solver, f"probit/{t}", 11, False)
    errors[t] = [np.mean((x - inst.x0) ** 2) for x in trace.x_hat]

print(" k   predicted   median of 20 runs   run-to-run spread")
for k in range(K + 1):
    print(f"{k:>2}   {se.mse_pred[k]:.5f}     {np.median(errors[:, k]):.5f}             {errors[:, k].std():.5f}")
print("signal power E[x0^2] =", PriorSpec.bernoulli_gaussian(0.1).second_moment)

"""GVAMP as an instance of a general two-chain recursion.

Any GVAMP run can be rewritten as a recursion on error vectors, with the
design matrix replaced by its right singular vectors. We check that the
rewritten recursion reproduces the solver iterate by iterate. We then build
the limiting Gaussian process, whose covariance says how the errors at
different iterations correlate, and compare it with one large solver run.
"""

import numpy as np

from mpforge.denoisers import ChannelSpec, PriorSpec
from mpforge.ensembles import SingularValueLaw, sample_rri_matrix
from mpforge.general import check_translation_equivalence, gvamp_general_model, track_gaussian_process
from mpforge.rng import stream
from mpforge.solvers import SolverConfig, make_instance, run_gvamp
from mpforge.state_evolution import run_se_gvamp, se_init_from_config

prior, channel, law = PriorSpec.bernoulli_gaussian(0.3), ChannelSpec.awgn(0.01), SingularValueLaw.uniform(4.0)
cfg = SolverConfig(init_mode="centered", init_var=0.5, max_iters=4, stop_change_eps=0.0)

fac = sample_rri_matrix(128, 256, law, rng=stream(1, "matrix"))
inst = make_instance(fac, prior, channel, stream(1, "signal"), stream(1, "noise"))
report = check_translation_equivalence(inst, prior, channel, cfg, 10, rng=stream(1, "init"))
print(f"largest relative gap between solver and rewritten recursion: {report.max_discrepancy:.1e}")

se = run_se_gvamp(prior, channel, law, 0.5, se_init_from_config(cfg, prior, law), 4, cfg, track_signal=False)
gp = track_gaussian_process(se, gvamp_general_model(prior, channel, law, 0.5, cfg), 4, rng=stream(2, "gp"))
sigma = gp.chains["in"].sigma_u

fac = sample_rri_matrix(2048, 4096, law, rng=stream(3, "matrix"))
big = make_instance(fac, prior, channel, stream(3, "signal"), stream(3, "noise"))
trace = run_gvamp(big, prior, channel, cfg, rng=stream(3, "init"), keep_inputs=True)
err = np.array(trace.inputs["r1"]) - big.x0
gram = err @ err.T / big.n

np.set_printoptions(precision=4, suppress=True)
print("limiting covariance of the input errors, iterations 0..4:")
print(sigma)
print("the same quantity from one run at N=4096:")
print(gram)

"""
Discrete information measures
=============================

Three small, exactly computable facts about representations:

1. the best factorized prior for a channel ``p(z|x)`` is the product of
   the marginals, and its expected KL equals ``I(x;z) + TC(z)``;
2. on a noisy bit, a stochastic encoder can beat every deterministic one
   for some trade-off weights;
3. the Gaussian total correlation of a covariance matrix.
"""
import numpy as np

from infodrop.metrics import (
    CovarianceSummary,
    discrete_ib_search,
    factorized_prior_objective,
    gaussian_total_correlation,
    joint_from_channel,
)
from infodrop.tensor import Rng

rng = Rng(7)
px = rng.gen.dirichlet(np.ones(4))
cond = rng.gen.dirichlet(np.ones(9), size=4).reshape(4, 3, 3)  # x has 4 states, z = two ternary parts
value, q = factorized_prior_objective(cond, px, method="iterative", rng=rng.child(0))
joint = joint_from_channel(cond, px)
identity = joint.mutual_information(["x"], ["z1", "z2"]) + joint.total_correlation(["z1", "z2"])
print(f"min over factorized q: {value:.12f}")
print(f"I(x;z) + TC(z):        {identity:.12f}")
print("optimal q1:", q[0].round(4), " marginal z1:", joint.marginal(["z1"]).round(4))

# %%
# Noisy bit, flip probability 0.2
for beta in (0.2, 0.26, 0.28, 0.3, 0.4):
    res = discrete_ib_search(0.2, beta, 0.005)
    det_name, det_val = res["best_deterministic"]
    print(f"beta={beta:.2f}  best deterministic {det_name:>8s} {det_val:.5f}   "
          f"best stochastic {res['best_stochastic'][1]:.5f}")

# %%
# Gaussian total correlation, two unit-variance coordinates with correlation 0.8
cov = CovarianceSummary(np.array([[1.0, 0.8], [0.8, 1.0]]))
print("TC:", gaussian_total_correlation(cov), " (= -1/2 log(1 - 0.64))")

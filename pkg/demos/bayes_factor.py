"""Can a Student-t regression tell heavy tails from normal noise?

For a few sample sizes, simulate regressions with t(3) and with normal
errors and report the log10 Bayes factor of normal over t errors.
Negative values favor heavy tails.
"""

import math

import numpy as np

from shrinkmvn.evaluation import bf_replicate

for n in (50, 200, 500):
    for nu in (3.0, np.inf):
        vals = [bf_replicate(n, nu, seed=s, T=400, burnin=100) / math.log(10) for s in range(5)]
        label = "normal" if not np.isfinite(nu) else f"t({nu:g})"
        print(f"n={n:4d}  errors {label:>7s}  log10 BF: " + " ".join(f"{v:7.2f}" for v in vals))

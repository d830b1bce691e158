"""Fit a GP surface to scattered irradiance-like values and look at its uncertainty.

Run with ``python3 demos/01_gp_basics.py``.
"""

import numpy as np

from solarfusion.gp import FitConfig, KernelParams, fit_gp
from solarfusion.synthetic import sample_gp, uniform_coords

rng = np.random.default_rng(0)

# %% A smooth field observed at 80 sites with a little noise
truth = KernelParams([0.05, 0.08], 400.0, 0.01)
X = uniform_coords(80, rng)
y = sample_gp(X, truth, rng, mean=200.0)

# %% Maximum likelihood with a few restarts
model = fit_gp(X, y, FitConfig(n_starts=4, seed=0))
p = model.params
print("fitted lengthscales", np.round(p.lengthscales, 4), "(true", truth.lengthscales, ")")
print("signal variance %.1f, nugget %.4f" % (p.signal_variance, p.nugget))

# %% Predictions shrink toward the mean away from the data
Q = np.array([[0.5, 0.5], [X[0, 0], X[0, 1]], [5.0, 5.0]])
pred = model.predict(Q)
for q, m, v in zip(Q, pred.mean, pred.variance):
    print(f"at {q}: mean {m:7.2f}  sd {np.sqrt(v):6.2f}")
print("far-away point reverts to the mean offset", round(model.mean_offset, 2))

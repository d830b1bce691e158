"""Where one global lengthscale is wrong, neighbourhood GPs adapt.

Run with ``python3 demos/03_local_gp.py``.
"""

import numpy as np

from solarfusion.evaluation import rmse
from solarfusion.gp import FitConfig, fit_gp
from solarfusion.localgp import LocalConfig, local_predict
from solarfusion.synthetic import two_regime_data

X, y, f = two_regime_data(n=400, seed=4)
train, test = np.arange(300), np.arange(300, 400)

# %% One global GP
glob = fit_gp(X[train], y[train], FitConfig(n_starts=2)).predict(X[test])

# %% A separate small GP per query, on 50 greedily chosen neighbours
loc = local_predict(X[train], y[train], X[test], LocalConfig(n=50, fit=FitConfig(n_starts=2)))

rough = X[test, 1] < 0.2
for name, p in (("global", glob), ("local", loc)):
    print(f"{name:6s} rmse all {rmse(p.mean, y[test]):.3f}  rough {rmse(p.mean[rough], y[test][rough]):.3f}"
          f"  smooth {rmse(p.mean[~rough], y[test][~rough]):.3f}")

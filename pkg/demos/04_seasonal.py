"""Daily predictions from spatially smoothed annual harmonics.

Run with ``python3 demos/04_seasonal.py``.
"""

import numpy as np

from solarfusion.seasonal import fit_coeff_field, seasonal_predict
from solarfusion.synthetic import harmonic_fields, seasonal_dataset

ds = seasonal_dataset(n_sites=40, n_days=365, seed=5, missing=0.1)

# %% Per-site least squares on (1, sin, cos), then one GP per coefficient
cf = fit_coeff_field(ds, "field")
S = np.array([[0.3, 0.3], [0.8, 0.2]])
mu, var = cf.predict_coefficients(S)
print("recovered coefficients\n", np.round(mu, 1))
print("planted coefficients\n", np.round(harmonic_fields(S), 1))

# %% A year at one new location
days = np.arange(0, 365, 30)
p = seasonal_predict(cf, S[:1], days)
for d, m, v in zip(days, p.mean[0], p.variance[0]):
    print(f"day {d:3d}: {m:7.1f} +/- {1.96 * np.sqrt(v):5.1f}")

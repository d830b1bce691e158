"""Correct a biased simulator with field data, then fuse two corrected simulators.

Run with ``python3 demos/02_calibration_and_fusion.py`` (about a minute).
"""

import numpy as np

from solarfusion.gp import FitConfig
from solarfusion.pipelines import run_comparison
from solarfusion.synthetic import calibration_dataset

# %% 120 stations; each simulator carries its own smooth spatial bias
ds = calibration_dataset(n_sites=120, seed=3)
print(ds.n_sites, "sites")

# %% Leave-one-station-out comparison of field-only, raw surrogate,
# bias-corrected surrogate and the fused pair of corrected surrogates
comps = ["field-hat", "simA-hat-nob", "simA-hat+b", "simB-hat+b", "ivw-hat"]
report = run_comparison(ds, comps, fit_config=FitConfig(n_starts=2), refit="warm")
print(report.to_text())

# %% The fused predictor is only as honest as its independence assumption
cov = {r.comparator: r.cov95 for r in report.rows}
print("coverage of corrected A %.3f vs fused %.3f" % (cov["simA-hat+b"], cov["ivw-hat"]))

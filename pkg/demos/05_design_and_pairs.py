"""Choose new simulator runs far from existing stations and build the request for them.

Run with ``python3 demos/05_design_and_pairs.py``.
"""

import numpy as np

from solarfusion.design import (CONUS_BOX, PAIRS_STEP, build_pairs_query, design_min_dist, maximin_design,
                                snap_to_grid)
from solarfusion.synthetic import uniform_coords

rng = np.random.default_rng(6)
stations = uniform_coords(50, rng, (25, 49, -124, -67))

# %% Greedy maximin against a random pick from the same region
design = maximin_design(12, stations, CONUS_BOX, seed=6)
rand = snap_to_grid(uniform_coords(12, rng, (25, 49, -124, -67)))
print("maximin min distance %.3f deg, random %.3f deg" % (design.achieved_min_dist,
                                                          design_min_dist(rand, stations)))

# %% Every chosen point sits on the fixed raster
print("grid step", PAIRS_STEP, "first point", design.points[0], "in steps", design.points[0] / PAIRS_STEP)

# %% Request document for the new sites
print(build_pairs_query("1400", "2016-04-14T23:00:00Z", "2016-04-15T00:00:00Z", design.points[:2])[:400])

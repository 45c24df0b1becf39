"""Effect of the computational grid spacing for a fixed sampling interval.

Runs a small slice of the refinement sweep on Van der Pol: for each
sampling interval the grid is refined by integer factors down to the
listed spacings, and the median metrics over a few seeds are printed.
"""
from collections import defaultdict

import numpy as np

from hybrid_discovery.harness import DiscoveryConfig, refinement_sweep, van_der_pol
from hybrid_discovery.selection import HyperGrid

cfg = DiscoveryConfig(hyper=HyperGrid(lambdas=(1.0, 10.0), Rs=(0.01,)))
rows = refinement_sweep(van_der_pol(), 0.1, 3, cfg, sample_intervals=(0.1, 0.2), grid_spacings=(0.05, 0.1, 0.2))
groups = defaultdict(list)
for dt_hat, dt, rec in rows:
    groups[dt_hat, dt].append(rec)
print("dt_hat    dt  RE(theta)  RE(u)   TPR")
for (dt_hat, dt), recs in sorted(groups.items()):
    med = lambda name: np.median([getattr(r, name) for r in recs])
    print(f"{dt_hat:6g} {dt:5g}  {med('re_theta'):9.3g}  {med('re_u'):5.3g}  {med('tpr'):4.2f}")

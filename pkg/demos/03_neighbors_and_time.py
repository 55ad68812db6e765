"""
Temporal graphs: radius neighbors and time encodings
====================================================
"""

import numpy as np

from ggode.graph import brute_force_neighbors, radius_neighbors, temporal_encoding

points = np.random.default_rng(0).uniform(0, 1, (500, 2))
pairs = radius_neighbors(points, 0.05)
same = {tuple(p) for p in pairs.tolist()} == {tuple(p) for p in brute_force_neighbors(points, 0.05).tolist()}
print(f"{len(pairs)} directed pairs within R=0.05, equal to brute force: {same}")

# sinusoidal encoding of time offsets; each (sin, cos) pair lies on the unit circle
te = temporal_encoding(np.array([0.0, 1.0, 10.0]), 8)
print(np.round(te, 3))

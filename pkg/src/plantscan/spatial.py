"""Spatial acceleration structure for nearest-neighbor and radius queries.

Thin wrapper over scipy's cKDTree; queries return exactly what a brute-force
scan would (the test suite checks this against an O(n^2) oracle).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from plantscan.errors import ValidationError


class SpatialIndex:
    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValidationError("cannot index an empty cloud")
        self._points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self._points)

    def nearest(self, queries: np.ndarray):
        """Distances and indices of the single nearest indexed point."""
        queries = np.asarray(queries, dtype=np.float64)
        dist, idx = self._tree.query(queries.reshape(-1, 3), k=1)
        if queries.ndim == 1:
            return float(dist[0]), int(idx[0])
        return dist, idx

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        """Indices of all points within distance ``r`` (inclusive) of ``query``."""
        return np.array(sorted(self._tree.query_ball_point(np.asarray(query, dtype=np.float64), r)),
                        dtype=np.int64)

    def radius_counts(self, queries: np.ndarray, r: float) -> np.ndarray:
        """Number of indexed points within ``r`` of each query point."""
        counts = self._tree.query_ball_point(np.asarray(queries, dtype=np.float64).reshape(-1, 3),
                                             r, return_length=True)
        return np.asarray(counts, dtype=np.int64)

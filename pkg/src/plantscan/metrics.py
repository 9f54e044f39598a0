"""Point-cloud quality metrics: accuracy, completeness and point density.

All three score a measured cloud against a reference cloud via
nearest-neighbor point-to-point distances. Units: clouds in meters,
tolerances/results in millimeters where noted.
"""

from __future__ import annotations

import numpy as np

from plantscan.cloud import PointCloud
from plantscan.errors import ValidationError
from plantscan.spatial import SpatialIndex

_MM = 1000.0


def accuracy(measured: PointCloud, reference: PointCloud) -> float:
    """Standard deviation (mm) of nearest-reference distances, zero-mean:
    sigma = sqrt(mean(d_i^2)). Lower is better."""
    if len(measured) == 0 or len(reference) == 0:
        raise ValidationError("accuracy requires non-empty clouds")
    dist, _ = SpatialIndex(reference.points).nearest(measured.points)
    return float(np.sqrt(np.mean(np.square(dist * _MM))))


def completeness(measured: PointCloud, reference: PointCloud, tol: float = 10.0) -> float:
    """Fraction of measured points within ``tol`` mm (inclusive) of the reference."""
    if len(measured) == 0 or len(reference) == 0:
        raise ValidationError("completeness requires non-empty clouds")
    if tol < 0:
        raise ValidationError("tolerance must be non-negative")
    dist, _ = SpatialIndex(reference.points).nearest(measured.points)
    return float(np.mean(dist * _MM <= tol))


def density(cloud: PointCloud, radius: float = 10.0) -> float:
    """Mean number of *other* points within ``radius`` mm of each point."""
    if len(cloud) == 0:
        raise ValidationError("density requires a non-empty cloud")
    index = SpatialIndex(cloud.points)
    counts = index.radius_counts(cloud.points, radius / _MM)
    return float(np.mean(counts - 1))  # query point always counts itself once

"""plantscan: from an industrial point cloud to a static environment model.

Pipeline stages: synthetic scene generation, Bayesian semantic segmentation
with uncertainty quantification, per-class instance clustering, RANSAC+ICP
pose estimation and AML-style XML export of the recovered object poses.
"""

from plantscan.cloud import PointCloud, load_cloud, save_cloud
from plantscan.registration import RigidTransform

__version__ = "0.1.0"

__all__ = ["PointCloud", "load_cloud", "save_cloud", "RigidTransform", "__version__"]

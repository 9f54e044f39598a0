"""Object pose extraction: clustering-based instance separation followed by
coarse RANSAC alignment of a reference template and ICP refinement.

Poses are expressed in millimeters and degrees (intrinsic Z-Y-X Euler angles)
relative to the scene origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from plantscan import clustering
from plantscan.cloud import PointCloud
from plantscan.errors import AlignmentError, EstimationError, ValidationError
from plantscan.registration import (RigidTransform, euler_zyx_to_matrix, icp,
                                    matrix_to_euler_zyx, ransac_align)

STRUCTURAL_CLASSES = ("floor", "ceiling", "wall")


@dataclass(frozen=True)
class ObjectPose:
    class_name: str
    instance_id: int
    x_mm: float
    y_mm: float
    z_mm: float
    roll_deg: float
    pitch_deg: float
    yaw_deg: float

    def __post_init__(self):
        for a in (self.roll_deg, self.pitch_deg, self.yaw_deg):
            if not -180.0 < a <= 180.0 + 1e-9:
                raise ValidationError(f"angle {a} outside (-180, 180]")

    def transform(self) -> RigidTransform:
        """The rigid transform placing the canonical template at this pose."""
        return RigidTransform(
            euler_zyx_to_matrix(self.roll_deg, self.pitch_deg, self.yaw_deg),
            np.array([self.x_mm, self.y_mm, self.z_mm]) / 1000.0)


def pose_from_transform(tf: RigidTransform, class_name: str, instance_id: int) -> ObjectPose:
    roll, pitch, yaw = matrix_to_euler_zyx(tf.R)
    x, y, z = tf.t * 1000.0
    return ObjectPose(class_name, instance_id, float(x), float(y), float(z),
                      roll, pitch, yaw)


@dataclass(frozen=True)
class PoseParams:
    ransac_iter: int = 4096
    inlier_tol: float = 0.02          # meters
    icp_max_iter: int = 200
    icp_tol: float = 1e-7
    seed: int = 0


def estimate_pose(instance: PointCloud, reference: PointCloud,
                  params: PoseParams = PoseParams(),
                  class_name: str = "", instance_id: int = 0) -> ObjectPose:
    """Register the canonical reference cloud onto one observed instance and
    read the pose off the final transform."""
    try:
        init, _ = ransac_align(reference, instance, n_iter=params.ransac_iter,
                               inlier_tol=params.inlier_tol, seed=params.seed)
        tf, _, _ = icp(reference, instance, init=init,
                       max_iter=params.icp_max_iter, tol=params.icp_tol)
    except (AlignmentError, EstimationError) as exc:
        raise type(exc)(f"{class_name}[{instance_id}]: {exc}") from exc
    return pose_from_transform(tf, class_name, instance_id)


def fit_plane_pose(points: np.ndarray, template_normal: np.ndarray,
                   class_name: str, instance_id: int) -> ObjectPose:
    """Least-squares plane fit for structural classes (floor/ceiling/wall).

    The pose rotates the template normal onto the fitted normal with zero
    spin about it and translates the template to the point centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 3:
        raise ValidationError("plane fit needs >= 3 points")
    centroid = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = Vt[-1]
    a = np.asarray(template_normal, dtype=np.float64)
    a = a / np.linalg.norm(a)
    if normal @ a < 0:
        normal = -normal
    v = np.cross(a, normal)
    c = float(a @ normal)
    if np.linalg.norm(v) < 1e-12:
        R = np.eye(3)
    else:
        vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        R = np.eye(3) + vx + vx @ vx / (1.0 + c)
    return pose_from_transform(RigidTransform(R, centroid), class_name, instance_id)


TEMPLATE_NORMALS = {"floor": (0.0, 0.0, 1.0), "ceiling": (0.0, 0.0, 1.0),
                    "wall": (0.0, 1.0, 0.0)}


def estimate_all(cloud: PointCloud, class_names: dict[int, str],
                 references: dict[str, PointCloud],
                 method: str = "optics", params: PoseParams = PoseParams(),
                 cluster_params: dict | None = None
                 ) -> tuple[list[ObjectPose], list[str]]:
    """Run instance clustering and pose estimation for every class present.

    Structural classes get a plane-constrained fit; everything else goes
    through RANSAC+ICP against its reference template. Per-instance failures
    are collected as messages, not raised. Output is ordered by
    (class index, instance id).
    """
    if cloud.labels is None:
        raise ValidationError("segmentation labels required")
    cluster_params = dict(cluster_params or {})
    poses: list[ObjectPose] = []
    failures: list[str] = []
    for class_index in sorted(class_names):
        name = class_names[class_index]
        mask = cloud.labels == class_index
        if not mask.any():
            continue
        if name in STRUCTURAL_CLASSES:
            try:
                poses.append(fit_plane_pose(cloud.points[mask],
                                            TEMPLATE_NORMALS[name], name, 0))
            except (ValidationError, EstimationError) as exc:
                failures.append(f"{name}[0]: {exc}")
            continue
        if name not in references:
            failures.append(f"{name}: no reference template")
            continue
        instances = clustering.cluster_class(cloud, class_index, method=method,
                                             seed=params.seed, **cluster_params)
        for inst_id, inst in enumerate(instances):
            try:
                poses.append(estimate_pose(inst, references[name], params,
                                           class_name=name, instance_id=inst_id))
            except (AlignmentError, EstimationError) as exc:
                failures.append(str(exc))
    return poses, failures

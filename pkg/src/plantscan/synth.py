"""Deterministic synthetic factory scenes with ground-truth object poses.

Object geometry is procedural: planes for floor/ceiling/walls, box composites
for cars, hangers, bands, linesides and columns. Every generated scene comes
with per-point class labels, per-point instance ids and the true pose of each
placed instance, so downstream stages can be scored exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from plantscan.cloud import PointCloud
from plantscan.errors import ValidationError
from plantscan.poses import ObjectPose, STRUCTURAL_CLASSES
from plantscan.registration import RigidTransform, euler_zyx_to_matrix

CLASS_NAMES = ("car", "hanger", "floor", "band", "lineside", "wall", "column",
               "ceiling", "clutter")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

# objects are sampled a bit sparser than the building shell; the ceiling is
# layered (two levels), which skews the histogram towards floor+ceiling the
# way real assembly halls do
_OBJECT_DENSITY_FACTOR = 0.7


def _box_faces(cx, cy, cz, lx, ly, lz):
    """Six rectangular faces of an axis-aligned box, as (center, u, v)."""
    hx, hy, hz = lx / 2, ly / 2, lz / 2
    return [
        ((cx, cy, cz - hz), (lx, 0, 0), (0, ly, 0)),   # bottom
        ((cx, cy, cz + hz), (lx, 0, 0), (0, ly, 0)),   # top
        ((cx, cy - hy, cz), (lx, 0, 0), (0, 0, lz)),
        ((cx, cy + hy, cz), (lx, 0, 0), (0, 0, lz)),
        ((cx - hx, cy, cz), (0, ly, 0), (0, 0, lz)),
        ((cx + hx, cy, cz), (0, ly, 0), (0, 0, lz)),
    ]


TEMPLATES: dict[str, list] = {
    "car": (_box_faces(0, 0, -0.3, 4.4, 1.8, 1.0)            # body
            + _box_faces(-0.3, 0, 0.5, 2.2, 1.6, 0.6)),      # cabin
    "hanger": (_box_faces(0, 0, 1.05, 3.4, 0.3, 0.3)         # top beam
               + _box_faces(-1.55, 0, 0.0, 0.3, 0.3, 2.4)    # posts
               + _box_faces(1.55, 0, 0.0, 0.3, 0.3, 2.4)
               + _box_faces(-1.55, 0.5, -1.05, 0.3, 1.0, 0.3)  # support arms
               + _box_faces(1.55, 0.5, -1.05, 0.3, 1.0, 0.3)),
    # Floor-standing boxes omit the bottom face: it rests on the floor where
    # no scanner can see it, and sampling it would plant points coincident
    # with the floor plane.
    "band": _box_faces(0, 0, 0, 6.0, 0.8, 0.3)[1:],
    "lineside": _box_faces(0, 0, 0, 2.0, 0.6, 2.0)[1:],
    "column": _box_faces(0, 0, 0, 0.3, 0.3, 3.5)[1:],
    "clutter": _box_faces(0, 0, 0, 0.4, 0.4, 0.4)[1:],
    "floor": [((0, 0, 0), (2.0, 0, 0), (0, 2.0, 0))],
    "ceiling": [((0, 0, 0), (2.0, 0, 0), (0, 2.0, 0))],
    "wall": [((0, 0, 0), (2.0, 0, 0), (0, 0, 2.0))],
}

_DEFAULT_COUNTS = {"car": 2, "hanger": 2, "column": 4, "lineside": 2,
                   "clutter": 3, "band": 1}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    tact_length: float = 8.0         # meters
    tact_width: float = 6.0
    tact_height: float = 4.0
    classes: frozenset = frozenset(CLASS_NAMES)
    noise_sigma: float = 2.0         # mm
    occlusion_fraction: float = 0.1
    points_per_m2: float = 120.0
    instance_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.tact_length, self.tact_width, self.tact_height) <= 0:
            raise ValidationError("tact dimensions must be positive")
        if not 0 <= self.occlusion_fraction < 1:
            raise ValidationError("occlusion_fraction must be in [0, 1)")
        if self.noise_sigma < 0 or self.points_per_m2 <= 0:
            raise ValidationError("noise_sigma >= 0 and points_per_m2 > 0 required")
        unknown = set(self.classes) - set(CLASS_NAMES)
        if unknown:
            raise ValidationError(f"unknown classes {sorted(unknown)}")
        object.__setattr__(self, "classes", frozenset(self.classes))

    def count(self, name: str) -> int:
        return int(self.instance_counts.get(name, _DEFAULT_COUNTS.get(name, 1)))


@dataclass(frozen=True)
class GroundTruth:
    poses: list            # ObjectPose per placed instance
    point_labels: np.ndarray
    point_instances: np.ndarray   # -1 for structural points

    def poses_of(self, class_name: str) -> list:
        return [p for p in self.poses if p.class_name == class_name]


def _face_area(face) -> float:
    _, u, v = face
    return float(np.linalg.norm(u) * np.linalg.norm(v))


def template_area(class_name: str) -> float:
    return sum(_face_area(f) for f in TEMPLATES[class_name])


def sample_reference(class_name: str, density: float = 2000.0) -> PointCloud:
    """Noise-free canonical-frame sampling of the class template.

    Each face carries a stratified grid with ~``density`` points/m^2, one
    point per cell, jittered inside its cell. Jitters are drawn in
    antithetic pairs over mirrored cells, so every face centroid stays
    exactly at the face center (symmetric templates keep an exactly
    centered centroid) while the points have no translational periodicity —
    a plain lattice would give ICP spurious grid-locked minima.
    """
    if class_name not in TEMPLATES:
        raise ValidationError(f"unknown class {class_name!r}")
    if density <= 0:
        raise ValidationError("density must be positive")
    rng = np.random.default_rng(zlib.crc32(f"ref:{class_name}:{density}".encode()))
    pts = []
    for center, u, v in TEMPLATES[class_name]:
        center, u, v = np.asarray(center, float), np.asarray(u, float), np.asarray(v, float)
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        nu = max(1, int(round(lu * np.sqrt(density))))
        nv = max(1, int(round(lv * np.sqrt(density))))
        su = (np.arange(nu) + 0.5) / nu - 0.5
        sv = (np.arange(nv) + 0.5) / nv - 0.5
        gu, gv = np.meshgrid(su, sv, indexing="ij")
        jit_u = np.zeros((nu, nv))
        jit_v = np.zeros((nu, nv))
        for i in range(nu):
            for j in range(nv):
                mi, mj = nu - 1 - i, nv - 1 - j
                if (i, j) > (mi, mj):
                    continue
                if (i, j) == (mi, mj):
                    continue    # self-mirrored center cell stays put
                jit_u[i, j], jit_v[i, j] = rng.uniform(-0.45, 0.45, 2)
                jit_u[mi, mj], jit_v[mi, mj] = -jit_u[i, j], -jit_v[i, j]
        gu = gu + jit_u / nu
        gv = gv + jit_v / nv
        pts.append(center + gu.reshape(-1, 1) * u + gv.reshape(-1, 1) * v)
    return PointCloud(np.concatenate(pts))


def _sample_faces_random(faces, density: float, rng: np.random.Generator) -> np.ndarray:
    pts = []
    for center, u, v in faces:
        center, u, v = np.asarray(center, float), np.asarray(u, float), np.asarray(v, float)
        n = max(1, int(round(_face_area((center, u, v)) * density)))
        su = rng.uniform(-0.5, 0.5, n)
        sv = rng.uniform(-0.5, 0.5, n)
        pts.append(center + su[:, None] * u + sv[:, None] * v)
    return np.concatenate(pts)


def occlusion_mask(points: np.ndarray, fraction: float,
                   rng: np.random.Generator,
                   scanner: np.ndarray | None = None) -> np.ndarray:
    """True for points to KEEP. Removes a contiguous angular sector (as seen
    from a scanner position) holding ``fraction`` of the points."""
    n = len(points)
    keep = np.ones(n, dtype=bool)
    n_drop = int(round(fraction * n))
    if n_drop == 0:
        return keep
    if scanner is None:
        scanner = points.mean(axis=0) + rng.uniform(-1.0, 1.0, 3)
    az = np.arctan2(points[:, 1] - scanner[1], points[:, 0] - scanner[0])
    start = rng.uniform(-np.pi, np.pi)
    order = np.argsort((az - start) % (2 * np.pi), kind="stable")
    keep[order[:n_drop]] = False
    return keep


def _layout(spec: SceneSpec, rng: np.random.Generator):
    """Instance poses per class for one tact. Deterministic given the rng."""
    L, W, H = spec.tact_length, spec.tact_width, spec.tact_height
    cx, cy = L / 2, W / 2
    placements: list[tuple[str, ObjectPose]] = []
    inst = {}

    def add(name, x, y, z, yaw):
        i = inst.get(name, 0)
        inst[name] = i + 1
        placements.append((name, ObjectPose(name, i, x * 1000, y * 1000, z * 1000,
                                            0.0, 0.0, float(yaw))))

    if "band" in spec.classes:
        for _ in range(spec.count("band")):
            add("band", cx, cy, 0.15, 0.0)
    def line_slots(n, stagger):
        """Positions along the line; consecutive slots alternate between two
        parallel lanes so long objects never touch their neighbors."""
        xs = cx + (np.arange(n) - (n - 1) / 2) * 3.2
        ys = cy + (np.arange(n) % 2 - 0.5) * stagger if n > 1 else np.full(n, cy)
        return zip(xs, ys)

    if "car" in spec.classes:
        for x, y in line_slots(spec.count("car"), 2.6):
            add("car", x + rng.uniform(-0.1, 0.1), y + rng.uniform(-0.05, 0.05),
                1.1, rng.uniform(-10, 10))
    if "hanger" in spec.classes:
        for x, y in line_slots(spec.count("hanger"), 2.6):
            add("hanger", x + rng.uniform(-0.1, 0.1), y + rng.uniform(-0.05, 0.05),
                2.3, rng.uniform(-10, 10))
    if "column" in spec.classes:
        slots = [(1.0, 0.6), (L - 1.0, 0.6), (1.0, W - 0.6), (L - 1.0, W - 0.6),
                 (cx, 0.6), (cx, W - 0.6)]
        for x, y in slots[:spec.count("column")]:
            add("column", x, y, 1.75, 0.0)
    if "lineside" in spec.classes:
        n = spec.count("lineside")
        xs = cx + (np.arange(n) - (n - 1) / 2) * 2.8
        for x in xs:
            add("lineside", x, W - 0.45, 1.0, rng.uniform(-5, 5))
    if "clutter" in spec.classes:
        for _ in range(spec.count("clutter")):
            add("clutter", rng.uniform(0.5, L - 0.5), rng.uniform(0.5, cy - 1.6),
                0.2, rng.uniform(-180, 179))
    return placements


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, GroundTruth]:
    """Sample a full labelled tact: building shell plus placed instances,
    Gaussian coordinate noise, sector occlusion. Deterministic given the seed."""
    rng = np.random.default_rng(spec.seed)
    L, W, H = spec.tact_length, spec.tact_width, spec.tact_height
    d = spec.points_per_m2

    chunks, labels, instances = [], [], []

    def emit(points, class_name, instance_id):
        chunks.append(points)
        labels.append(np.full(len(points), CLASS_INDEX[class_name], dtype=np.int64))
        instances.append(np.full(len(points), instance_id, dtype=np.int64))

    # building shell
    if "floor" in spec.classes:
        emit(_sample_faces_random([((L / 2, W / 2, 0.0), (L, 0, 0), (0, W, 0))], d, rng),
             "floor", -1)
    if "ceiling" in spec.classes:
        for z in (H, H - 0.4):        # layered ceiling structure
            emit(_sample_faces_random([((L / 2, W / 2, z), (L, 0, 0), (0, W, 0))], d, rng),
                 "ceiling", -1)
    if "wall" in spec.classes:
        for y in (0.0, W):
            emit(_sample_faces_random([((L / 2, y, H / 2), (L, 0, 0), (0, 0, H))], d, rng),
                 "wall", -1)

    # placed instances
    placements = _layout(spec, rng)
    poses = [p for _, p in placements]
    for gid, (name, pose) in enumerate(placements):
        local = _sample_faces_random(TEMPLATES[name], d * _OBJECT_DENSITY_FACTOR, rng)
        if name == "clutter":
            local = local * rng.uniform(0.5, 1.5)   # clutter boxes vary in size
        emit(pose.transform().apply(local), name, gid)

    if not chunks:
        raise ValidationError("scene spec selects no classes")
    points = np.concatenate(chunks)
    labels = np.concatenate(labels)
    instances = np.concatenate(instances)

    if spec.noise_sigma > 0:
        points = points + rng.normal(0.0, spec.noise_sigma / 1000.0, points.shape)
    if spec.occlusion_fraction > 0:
        scanner = np.array([rng.uniform(1, L - 1), rng.uniform(1, W - 1), 1.5])
        keep = occlusion_mask(points, spec.occlusion_fraction, rng, scanner)
        points, labels, instances = points[keep], labels[keep], instances[keep]

    cloud = PointCloud(points, labels=labels)
    return cloud, GroundTruth(poses, labels, instances)


def class_map(spec: SceneSpec | None = None) -> dict[int, str]:
    """Class index -> name mapping (full canonical set)."""
    return {i: n for i, n in enumerate(CLASS_NAMES)}

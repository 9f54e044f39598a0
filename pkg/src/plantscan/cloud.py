"""Point-cloud container, XYZL file I/O, voxel downsampling and block partitioning.

Coordinates are metric (meters) throughout. The on-disk format is a plain
ASCII table with a one-line header, see :func:`load_cloud`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from plantscan.errors import ParseError, ValidationError

_VALID_COLS = (3, 4, 6, 7)


@dataclass(frozen=True)
class PointCloud:
    """Immutable point set with optional per-point colors and class labels."""

    points: np.ndarray                      # (n, 3) float64, meters
    colors: Optional[np.ndarray] = None     # (n, 3) uint8 in [0, 255]
    labels: Optional[np.ndarray] = None     # (n,) int64 class indices

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != (len(pts), 3):
                raise ValidationError(
                    f"colors shape {col.shape} does not match {len(pts)} points")
            object.__setattr__(self, "colors", col.astype(np.uint8))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != len(pts):
                raise ValidationError(
                    f"{lab.shape[0]} labels for {len(pts)} points")
            if len(lab) and lab.min() < 0:
                raise ValidationError("labels must be non-negative")
            object.__setattr__(self, "labels", lab)
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_indices) -> "PointCloud":
        """New cloud restricted to the given boolean mask or index array."""
        idx = np.asarray(mask_or_indices)
        return PointCloud(
            self.points[idx],
            None if self.colors is None else self.colors[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, self.colors, labels)

    def transformed(self, transform) -> "PointCloud":
        return PointCloud(transform.apply(self.points), self.colors, self.labels)


def load_cloud(path, fmt: str = "xyzl-ascii") -> PointCloud:
    """Read an XYZL ASCII file.

    First line is ``#xyzl v1 cols=<3|4|6|7>``; every following line holds
    ``x y z [r g b] [label]`` whitespace-separated, coordinates in meters.
    """
    if fmt != "xyzl-ascii":
        raise ValidationError(f"unknown format {fmt!r}")
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#xyzl v1 cols="):
            raise ParseError(f"{path}: line 1: bad header {header!r}")
        try:
            cols = int(header.split("cols=")[1])
        except ValueError:
            raise ParseError(f"{path}: line 1: bad header {header!r}") from None
        if cols not in _VALID_COLS:
            raise ParseError(f"{path}: line 1: cols must be one of {_VALID_COLS}")

        pts, colors, labels = [], [], []
        has_color = cols in (6, 7)
        has_label = cols in (4, 7)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != cols:
                raise ParseError(
                    f"{path}: line {lineno}: expected {cols} columns, got {len(fields)}")
            try:
                vals = [float(v) for v in fields[:3]]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: bad coordinate") from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
            pts.append(vals)
            off = 3
            if has_color:
                try:
                    rgb = [int(v) for v in fields[off:off + 3]]
                except ValueError:
                    raise ParseError(f"{path}: line {lineno}: bad color") from None
                if any(c < 0 or c > 255 for c in rgb):
                    raise ParseError(f"{path}: line {lineno}: color outside [0,255]")
                colors.append(rgb)
                off += 3
            if has_label:
                try:
                    labels.append(int(fields[off]))
                except ValueError:
                    raise ParseError(f"{path}: line {lineno}: bad label") from None

    return PointCloud(
        np.array(pts, dtype=np.float64).reshape(-1, 3),
        np.array(colors, dtype=np.uint8).reshape(-1, 3) if has_color else None,
        np.array(labels, dtype=np.int64) if has_label else None,
    )


def save_cloud(cloud: PointCloud, path) -> None:
    """Write ``cloud`` in the XYZL ASCII format (LF line endings).

    Coordinates are printed with enough digits to round-trip to <= 1e-6 m.
    """
    cols = 3 + (3 if cloud.colors is not None else 0) + (1 if cloud.labels is not None else 0)
    lines = [f"#xyzl v1 cols={cols}"]
    for i in range(len(cloud)):
        x, y, z = cloud.points[i]
        parts = [f"{x:.9f}", f"{y:.9f}", f"{z:.9f}"]
        if cloud.colors is not None:
            parts += [str(int(c)) for c in cloud.colors[i]]
        if cloud.labels is not None:
            parts.append(str(int(cloud.labels[i])))
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def downsample_voxel(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel; representative label is the majority
    label in the voxel, ties broken by lowest class index."""
    if voxel <= 0:
        raise ValidationError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n_vox = len(counts)
    centroids = np.zeros((n_vox, 3))
    for d in range(3):
        centroids[:, d] = np.bincount(inverse, weights=cloud.points[:, d], minlength=n_vox)
    centroids /= counts[:, None]

    labels = None
    if cloud.labels is not None:
        n_classes = int(cloud.labels.max()) + 1
        # vote table voxel x class; argmax picks the lowest index on ties
        votes = np.zeros((n_vox, n_classes), dtype=np.int64)
        np.add.at(votes, (inverse, cloud.labels), 1)
        labels = votes.argmax(axis=1)
    return PointCloud(centroids, None, labels)


@dataclass(frozen=True)
class Block:
    """One x-y grid cell of a cloud, resampled to a fixed point budget."""

    origin: tuple                  # (x, y) corner in meters
    point_indices: np.ndarray      # all parent-cloud indices inside the cell
    resampled_indices: np.ndarray  # exactly block_size parent indices (with repeats)
    resampled_points: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.resampled_points is None:
            raise ValidationError("resampled_points required")


def partition_blocks(cloud: PointCloud, block_edge: float,
                     block_size: int = 4096, seed: int = 0) -> list[Block]:
    """Cut the cloud into an axis-aligned x-y grid of ``block_edge`` cells.

    Every non-empty cell becomes a Block whose points are resampled to
    exactly ``block_size``: drawn with replacement when the cell holds fewer
    points, uniformly subsampled without replacement when it holds more.
    Deterministic given ``seed``.
    """
    if block_edge <= 0:
        raise ValidationError("block_edge must be positive")
    if block_size < 1:
        raise ValidationError("block_size must be >= 1")
    if len(cloud) == 0:
        return []
    rng = np.random.default_rng(seed)
    lo = cloud.points[:, :2].min(axis=0)
    cell = np.floor((cloud.points[:, :2] - lo) / block_edge).astype(np.int64)
    keys, inverse = np.unique(cell, axis=0, return_inverse=True)
    blocks = []
    for b, key in enumerate(keys):
        idx = np.nonzero(inverse == b)[0]
        if len(idx) >= block_size:
            pick = rng.choice(idx, size=block_size, replace=False)
        else:
            pick = rng.choice(idx, size=block_size, replace=True)
        origin = (float(lo[0] + key[0] * block_edge), float(lo[1] + key[1] * block_edge))
        blocks.append(Block(origin, idx, pick, cloud.points[pick]))
    return blocks

"""Rigid transforms and point-cloud registration (coarse RANSAC + ICP).

Euler angles use the intrinsic Z-Y-X (yaw-pitch-roll) convention throughout,
in degrees, range (-180, 180].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from plantscan.cloud import PointCloud
from plantscan.errors import AlignmentError, EstimationError, RegistrationError, ValidationError


@dataclass(frozen=True)
class RigidTransform:
    """x -> s * R @ x + t with R orthonormal, det(R) = +1."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) <= 0:
            raise ValidationError("R is not a proper rotation")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.s * pts @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidTransform(self.R @ other.R,
                              self.s * self.R @ other.t + self.t,
                              self.s * other.s)

    def inverse(self) -> "RigidTransform":
        Rinv = self.R.T
        return RigidTransform(Rinv, -Rinv @ self.t / self.s, 1.0 / self.s)


def euler_zyx_to_matrix(roll_deg: float, pitch_deg: float, yaw_deg: float) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X angles: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = np.deg2rad([roll_deg, pitch_deg, yaw_deg])
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def _wrap_deg(a: float) -> float:
    """Map to (-180, 180]."""
    a = (a + 180.0) % 360.0 - 180.0
    return 180.0 if a == -180.0 else a


def matrix_to_euler_zyx(R: np.ndarray) -> tuple[float, float, float]:
    """(roll, pitch, yaw) in degrees for R = Rz(yaw) Ry(pitch) Rx(roll).

    At gimbal lock (|pitch| = 90 deg) yaw is set to 0 and roll absorbs the
    remaining rotation.
    """
    R = np.asarray(R, dtype=np.float64)
    sp = -R[2, 0]
    sp = np.clip(sp, -1.0, 1.0)
    pitch = np.arcsin(sp)
    if abs(sp) > 1.0 - 1e-12:
        # R[0,1] = -cos(p)... degenerate; with yaw := 0:
        # R = Ry(+-90) Rx(roll), so roll = atan2(-R[1,2], R[1,1])
        yaw = 0.0
        roll = np.arctan2(-R[1, 2], R[1, 1])
    else:
        yaw = np.arctan2(R[1, 0], R[0, 0])
        roll = np.arctan2(R[2, 1], R[2, 2])
    return (float(_wrap_deg(np.rad2deg(roll))),
            float(_wrap_deg(np.rad2deg(pitch))),
            float(_wrap_deg(np.rad2deg(yaw))))


def kabsch(source: np.ndarray, target: np.ndarray, with_scale: bool = False) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` onto ``target``
    (SVD / Umeyama). Requires matched rows."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or len(src) < 3:
        raise ValidationError("need >= 3 matched point pairs")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    ds, dt = src - mu_s, tgt - mu_t
    H = ds.T @ dt / len(src)
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-15:
        raise EstimationError("degenerate geometry: rank-deficient covariance")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    if with_scale:
        var_s = np.mean(np.sum(ds * ds, axis=1))
        s = float(np.trace(np.diag(S) @ D) / var_s)
    else:
        s = 1.0
    t = mu_t - s * R @ mu_s
    return RigidTransform(R, t, s)


def icp(source: PointCloud, target: PointCloud,
        init: RigidTransform | None = None,
        max_iter: int = 50, tol: float = 1e-7,
        trim_factor: float = 3.0) -> tuple[RigidTransform, float, list[float]]:
    """Point-to-point ICP refining ``init`` so that source maps onto target.

    Each iteration matches every transformed source point to its nearest
    target point, drops correspondences farther than ``trim_factor`` times
    the median distance (robustness to occlusion holes: unmatched points in
    a hole would otherwise drag the solution toward closing the hole), and
    solves the rigid update with the SVD solver. The RMS is measured over
    the kept correspondences; iterations that fail to lower it terminate
    the loop, so the returned RMS history is non-increasing.

    Returns (transform, final trimmed-correspondence RMS, RMS history).
    """
    if len(source) < 3 or len(target) < 3:
        raise ValidationError("icp requires >= 3 points per cloud")
    transform = init if init is not None else RigidTransform.identity()
    tree = cKDTree(target.points)

    def eval_at(tf: RigidTransform):
        """(trimmed RMS, distances, NN indices, keep mask) at a transform."""
        dist, idx = tree.query(tf.apply(source.points))
        cutoff = max(trim_factor * np.median(dist), 1e-12)
        keep = dist <= cutoff
        if not keep.any():
            keep = np.ones(len(dist), dtype=bool)
        return float(np.sqrt(np.mean(dist[keep] ** 2))), dist, idx, keep

    rms, dist, idx, keep = eval_at(transform)
    history = [rms]
    for _ in range(max_iter):
        moved = transform.apply(source.points)
        # solve on the trimmed set; if that step stalls, retry untrimmed
        # before declaring convergence
        accepted = None
        for mask in ((keep, np.ones(len(dist), dtype=bool)) if keep.sum() >= 3
                     else (np.ones(len(dist), dtype=bool),)):
            try:
                step = kabsch(moved[mask], target.points[idx[mask]])
            except EstimationError:
                continue
            candidate = step.compose(transform)
            new = eval_at(candidate)
            if new[0] < rms - tol:
                accepted = (candidate, new)
                break
            if new[0] < rms and accepted is None:
                accepted = (candidate, new)
        if accepted is None:
            break
        transform, (rms, dist, idx, keep) = accepted
        history.append(rms)
        if len(history) >= 2 and history[-2] - rms < tol:
            break
    return transform, rms, history


def _robust_refine(points: np.ndarray, target_points: np.ndarray,
                   tree: cKDTree, init: RigidTransform,
                   c0: float, c_min: float, shrink: float = 0.85
                   ) -> RigidTransform:
    """Annealed-threshold alignment for coarse hypotheses.

    Iterates nearest-neighbour correspondence with a hard inclusion radius
    that starts wide (capturing structure far from its counterpart, e.g. a
    pose slid along a face) and shrinks each iteration (finally releasing
    points with no true counterpart, e.g. occlusion holes). No
    monotonicity contract — use ``icp`` afterwards to polish.
    """
    transform = init
    c = c0
    while True:
        # settle at each radius before shrinking, otherwise residual errors
        # larger than the next radius get released and freeze in place
        for _ in range(3):
            d, idx = tree.query(transform.apply(points))
            keep = d <= c
            if keep.sum() < 3:
                break
            try:
                step = kabsch(transform.apply(points[keep]),
                              target_points[idx[keep]])
            except EstimationError:
                break
            transform = step.compose(transform)
        if c <= c_min:
            return transform
        c = max(c_min, c * shrink)


def _rotation_angle_deg(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def ransac_align(source: PointCloud, target: PointCloud,
                 n_iter: int = 4096, inlier_tol: float = 0.02,
                 seed: int = 0, min_inlier_fraction: float = 0.10
                 ) -> tuple[RigidTransform, float]:
    """Coarse alignment without an initial guess.

    Hypotheses come from distance-congruent triplets: sample 3 spread-out
    source points, gather target point pairs whose distance matches the
    first triplet edge (via a precomputed pairwise-distance matrix of a
    target subsample), complete each pair to a congruent triplet, solve the
    3-point rigid transform and score it against the target. ``n_iter``
    bounds the number of scored hypotheses. The few best-scoring hypotheses
    with genuinely different rotations are refined by a short ICP and the
    one with the lowest RMS wins, which disambiguates near-symmetric
    shapes. Raises AlignmentError when no hypothesis reaches
    ``min_inlier_fraction``.
    """
    if len(source) < 3 or len(target) < 3:
        raise ValidationError("ransac_align requires >= 3 points per cloud")
    rng = np.random.default_rng(seed)
    # hypothesis search runs on capped subsamples; scoring always queries
    # the full target cloud
    src_all = source.points
    src = (src_all if len(src_all) <= 600
           else src_all[rng.choice(len(src_all), 600, replace=False)])
    anchors = (target.points if len(target) <= 1500
               else target.points[rng.choice(len(target.points), 1500,
                                             replace=False)])
    tree = cKDTree(target.points)
    pre_pts = src[rng.choice(len(src), min(48, len(src)), replace=False)]
    score_pts = src[rng.choice(len(src), min(384, len(src)), replace=False)]
    back_pts = (target.points if len(target) <= 384
                else target.points[rng.choice(len(target.points), 384,
                                              replace=False)])

    # the inlier band cannot be tighter than the target's sampling spacing
    nn_d, _ = tree.query(anchors, k=2)
    eff_tol = max(inlier_tol, 1.5 * float(np.median(nn_d[:, 1])))

    m = len(anchors)
    D = np.linalg.norm(anchors[:, None, :] - anchors[None, :, :],
                       axis=2).astype(np.float32)
    off = D + np.where(np.eye(m, dtype=bool), np.inf, 0.0)
    anchor_spacing = float(np.median(off.min(axis=1)))
    # congruence matching must tolerate the anchor subsample's spacing
    c_tol = max(2.0 * eff_tol, 1.5 * anchor_spacing)

    diam = float(np.linalg.norm(src.max(axis=0) - src.min(axis=0)))
    min_sep = max(0.25 * diam, 4 * c_tol)

    def score(hyp: RigidTransform) -> tuple[float, float]:
        """(inlier fraction, symmetric clamped mean distance; lower wins)."""
        moved = hyp.apply(score_pts)
        d_st, _ = tree.query(moved)
        d_ts, _ = cKDTree(moved).query(back_pts)
        frac = float(np.mean(d_st <= eff_tol))
        soft = float(np.mean(np.minimum(d_st, 2 * eff_tol))
                     + np.mean(np.minimum(d_ts, 2 * eff_tol)))
        return frac, soft

    top: list[tuple[float, float, RigidTransform]] = []   # (soft, frac, hyp)
    budget = n_iter
    for _ in range(256):
        if budget <= 0 or (top and top[0][1] >= 0.97):
            break
        # wide-base triplet: a near-diameter edge is rare in both clouds, so
        # distance congruence alone already pins down the correspondence
        batch = src[rng.choice(len(src), min(48, len(src)), replace=False)]
        a = src[rng.integers(len(src))]
        b = batch[np.argmax(np.linalg.norm(batch - a, axis=1))]
        spread = np.minimum(np.linalg.norm(batch - a, axis=1),
                            np.linalg.norm(batch - b, axis=1))
        c = batch[np.argmax(spread)]
        d_ab, d_ac, d_bc = (np.linalg.norm(a - b), np.linalg.norm(a - c),
                            np.linalg.norm(b - c))
        if min(d_ab, d_ac, d_bc) < min_sep:
            continue
        err = np.abs(D - d_ab)
        pairs = np.argwhere(err <= c_tol)
        if len(pairs) == 0:
            continue
        if len(pairs) > 512:
            order = np.argsort(err[pairs[:, 0], pairs[:, 1]], kind="stable")
            pairs = pairs[order[:512]]
        for ai, bi in pairs:
            cand_c = np.nonzero((np.abs(D[ai] - d_ac) <= c_tol)
                                & (np.abs(D[bi] - d_bc) <= c_tol))[0]
            if len(cand_c) == 0:
                continue
            ci = cand_c[np.argmin(np.abs(D[ai][cand_c] - d_ac)
                                  + np.abs(D[bi][cand_c] - d_bc))]
            try:
                hyp = kabsch(np.array([a, b, c]),
                             np.array([anchors[ai], anchors[bi], anchors[ci]]))
            except (EstimationError, ValidationError):
                continue
            budget -= 1
            # 3-point solves inherit the congruence slack; tighten with a
            # few nearest-neighbour refits before scoring, drop hopeless ones
            d, idx = tree.query(hyp.apply(pre_pts))
            if float(np.mean(d <= c_tol)) < 0.35:
                continue
            for _ in range(3):
                keep = d <= max(3.0 * np.median(d), 1e-12)
                if keep.sum() < 3:
                    break
                try:
                    step = kabsch(hyp.apply(pre_pts[keep]),
                                  target.points[idx[keep]])
                except EstimationError:
                    break
                hyp = step.compose(hyp)
                d, idx = tree.query(hyp.apply(pre_pts))
            frac, soft = score(hyp)
            # one shortlist slot per rotation basin, keeping the best score
            twin = next((n for n, (_, _, h) in enumerate(top)
                         if _rotation_angle_deg(hyp.R, h.R) <= 10.0), None)
            if twin is not None:
                if soft < top[twin][0]:
                    top[twin] = (soft, frac, hyp)
                    top.sort(key=lambda e: e[0])
            elif len(top) < 16 or soft < top[-1][0]:
                top.append((soft, frac, hyp))
                top.sort(key=lambda e: e[0])
                del top[16:]
            if budget <= 0:
                break

    if not top or max(frac for _, frac, _ in top) < min_inlier_fraction:
        best_frac = max((frac for _, frac, _ in top), default=0.0)
        raise AlignmentError(
            f"no coarse alignment with inlier fraction >= {min_inlier_fraction:.0%} "
            f"(best {best_frac:.1%})")

    # near-symmetric shapes produce several well-scoring hypotheses whose
    # rotations are far apart; a short ICP from each identifies the true one
    finalists: list[RigidTransform] = []
    for _, _, hyp in top:
        if all(_rotation_angle_deg(hyp.R, f.R) > 15.0 for f in finalists):
            finalists.append(hyp)
        if len(finalists) == 6:
            break
    # box-like shapes are nearly self-congruent under 180-degree turns about
    # their principal axes, and RANSAC may sample only the wrong basin; test
    # those counterparts of the leading finalists explicitly
    centroid = src.mean(axis=0)
    _, _, axes = np.linalg.svd(src - centroid, full_matrices=False)
    variants: list[RigidTransform] = []
    for hyp in list(finalists[:2]):
        for axis in axes:
            R_pi = 2.0 * np.outer(axis, axis) - np.eye(3)
            flip = RigidTransform(R_pi, centroid - R_pi @ centroid)
            cand = hyp.compose(flip)
            # do not dedupe against the search finalists: a variant lands in
            # an already-claimed basin with a far better starting point
            if all(_rotation_angle_deg(cand.R, v.R) > 15.0 for v in variants):
                variants.append(cand)
    finalists.extend(variants)

    # trimmed RMS would hide a near-symmetric shape's mismatched parts, so
    # the refined finalists compete on the symmetric soft score instead;
    # refinement needs a denser subsample than the triplet search or its
    # correspondence field is too rough to converge
    icp_pts = (src_all if len(src_all) <= 2500
               else src_all[rng.choice(len(src_all), 2500, replace=False)])
    best, best_soft = finalists[0], np.inf
    for hyp in finalists:
        refined = _robust_refine(icp_pts, target.points, tree, hyp,
                                 c0=0.5 * diam, c_min=eff_tol)
        _, soft = score(refined)
        if soft < best_soft:
            best, best_soft = refined, soft
    d, _ = tree.query(best.apply(src_all))
    return best, float(np.mean(d <= eff_tol))


def register_scans(scans: list[PointCloud], anchor: int = 0,
                   inlier_tol: float = 0.05, seed: int = 0) -> list[RigidTransform]:
    """Chain pairwise coarse+fine registration of consecutive scans into the
    anchor scan's frame. Returns one transform per scan."""
    if not scans:
        raise ValidationError("no scans given")
    if not 0 <= anchor < len(scans):
        raise ValidationError("anchor index out of range")
    # pairwise transforms scan[i+1] -> scan[i]
    step: dict[int, RigidTransform] = {}
    for i in range(len(scans) - 1):
        try:
            coarse, _ = ransac_align(scans[i + 1], scans[i], inlier_tol=inlier_tol,
                                     seed=seed + i)
            fine, _, _ = icp(scans[i + 1], scans[i], init=coarse)
        except (AlignmentError, EstimationError) as exc:
            raise RegistrationError(
                f"registration chain broke between scans {i + 1} and {i}: {exc}") from exc
        step[i + 1] = fine

    out = []
    for i in range(len(scans)):
        tf = RigidTransform.identity()
        if i > anchor:
            # frame i -> anchor: step[anchor+1] o ... o step[i]
            for j in range(anchor + 1, i + 1):
                tf = tf.compose(step[j])
        elif i < anchor:
            # frame i -> anchor: step[anchor]^-1 o ... o step[i+1]^-1
            for j in range(i + 1, anchor + 1):
                tf = step[j].inverse().compose(tf)
        out.append(tf)
    return out

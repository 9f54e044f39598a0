"""Pipeline stages wiring the modules into the end-to-end workflow.

Each stage consumes the artifacts of the previous one from a shared output
directory, writes its own artifacts (clouds, checkpoints, CSV reports with
PNG figures, AML files) plus a JSON run manifest, and is skipped on re-runs
when its config hash still matches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from plantscan import aml, clustering, figures, metrics, segnet, synth, uncertainty
from plantscan.cloud import PointCloud, downsample_voxel, load_cloud, partition_blocks, save_cloud
from plantscan.errors import StageError
from plantscan.poses import PoseParams, estimate_all
from plantscan.uncertainty import PredictiveSamples

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "synth": {
        "n_tacts": 10, "held_out": 2,
        "tact_length": 8.0, "tact_width": 6.0, "tact_height": 4.0,
        "noise_sigma": 2.0, "occlusion_fraction": 0.1, "points_per_m2": 200.0,
        "classes": list(synth.CLASS_NAMES),
    },
    "segnet": {
        "mode": "bayesian", "epochs": 150, "batch_size": 16,
        "voxel": 0.06, "block_edge": 2.0, "block_size": 1024, "mc_samples": 50,
    },
    "uncertainty": {"method": "predictive", "k_sigma": 2.0},
    "cluster": {"method": "optics", "min_pts": 8, "xi": 0.05,
                "classes": ["car", "hanger"]},
    "pose": {"inlier_tol": 0.05, "ransac_iter": 2048, "reference_density": 600.0},
    "export": {"name": "scene"},
    "savings": {"cost_per_m2": 1.5, "area_per_plant": 950000.0,
                "scanned_fraction": 0.6, "n_plants": 10, "scans_per_year": 1.0,
                "automation_degree": 0.7},
}


def merge_config(user: dict | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, val in (user or {}).items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def _hash(cfg: dict, *sections: str) -> str:
    payload = {"seed": cfg["seed"]}
    for s in sections:
        payload[s] = cfg[s]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _write_manifest(out: Path, stage: str, cfg_hash: str, seed: int,
                    elapsed: float, artifacts: list[str]) -> None:
    manifest = {"stage": stage, "config_hash": cfg_hash, "seed": seed,
                "elapsed_s": round(elapsed, 3), "artifacts": artifacts}
    (out / f"manifest_{stage}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _fresh(out: Path, stage: str, cfg_hash: str) -> bool:
    """True when the stage's manifest matches and its artifacts still exist."""
    path = out / f"manifest_{stage}.json"
    if not path.exists():
        return False
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("config_hash") != cfg_hash:
        return False
    return all((out / a).exists() for a in manifest.get("artifacts", []))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                             else v for v in row])


def _scene_spec(cfg: dict, tact: int) -> synth.SceneSpec:
    sc = cfg["synth"]
    return synth.SceneSpec(
        seed=cfg["seed"] * 10_000 + tact,
        tact_length=sc["tact_length"], tact_width=sc["tact_width"],
        tact_height=sc["tact_height"], classes=frozenset(sc["classes"]),
        noise_sigma=sc["noise_sigma"],
        occlusion_fraction=sc["occlusion_fraction"],
        points_per_m2=sc["points_per_m2"])


def _room_extent(cfg: dict):
    sc = cfg["synth"]
    return (sc["tact_length"], sc["tact_width"], sc["tact_height"])


def stage_synth(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """Generate all tacts as XYZL clouds plus ground-truth AML manifests."""
    h = _hash(cfg, "synth")
    if not force and _fresh(out, "synth", h):
        return []
    t0 = time.perf_counter()
    artifacts = []
    for tact in range(cfg["synth"]["n_tacts"]):
        cloud, gt = synth.generate_scene(_scene_spec(cfg, tact))
        cloud_path = out / f"tact_{tact:02d}.xyzl"
        save_cloud(cloud, cloud_path)
        gt_path = out / f"tact_{tact:02d}_gt.aml"
        aml.write_aml(aml.SceneModel(f"tact_{tact:02d}", gt.poses,
                                     source="ground-truth"), gt_path)
        np.savez(out / f"tact_{tact:02d}_gt.npz",
                 labels=gt.point_labels, instances=gt.point_instances)
        artifacts += [cloud_path.name, gt_path.name, f"tact_{tact:02d}_gt.npz"]
    _write_manifest(out, "synth", h, cfg["seed"], time.perf_counter() - t0, artifacts)
    return artifacts


def _tact_split(cfg: dict) -> tuple[list[int], list[int]]:
    n, held = cfg["synth"]["n_tacts"], cfg["synth"]["held_out"]
    return list(range(n - held)), list(range(n - held, n))


def _load_tact(cfg: dict, out: Path, tact: int) -> PointCloud:
    path = out / f"tact_{tact:02d}.xyzl"
    if not path.exists():
        raise StageError(f"missing upstream artifact {path.name}; run synth first")
    return load_cloud(path)


def _prepare_blocks(cfg: dict, cloud: PointCloud, seed: int):
    sg = cfg["segnet"]
    down = downsample_voxel(cloud, sg["voxel"]) if sg["voxel"] > 0 else cloud
    blocks = partition_blocks(down, sg["block_edge"], sg["block_size"], seed=seed)
    x, y = segnet.blocks_to_tensors(down, blocks, sg["block_edge"], _room_extent(cfg))
    return down, blocks, x, y


def stage_train(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """Train the segmentation network on the non-held-out tacts."""
    h = _hash(cfg, "synth", "segnet")
    if not force and _fresh(out, "train", h):
        return []
    t0 = time.perf_counter()
    sg = cfg["segnet"]
    train_tacts, _ = _tact_split(cfg)
    xs, ys = [], []
    for tact in train_tacts:
        _, _, x, y = _prepare_blocks(cfg, _load_tact(cfg, out, tact), cfg["seed"] + tact)
        xs.append(x)
        ys.append(y)
    x, y = torch.cat(xs), torch.cat(ys)
    net_cfg = segnet.NetworkConfig(mode=sg["mode"], n_classes=len(synth.CLASS_NAMES),
                                   n_pts=sg["block_size"])
    train_cfg = segnet.TrainConfig.for_mode(sg["mode"], epochs=sg["epochs"],
                                            batch_size=sg["batch_size"],
                                            seed=cfg["seed"])
    net, history = segnet.train(train_cfg, net_cfg, x, y)
    segnet.save_checkpoint(net, out / "checkpoint.npz")
    _write_csv(out / "train_metrics.csv", ["epoch", "loss", "accuracy", "lr"],
               [[hrow["epoch"], hrow["loss"], hrow["accuracy"], hrow["lr"]]
                for hrow in history])
    try:
        figures.save_training_curves(history, out / "train_curves.png")
    except Exception:
        pass
    _write_manifest(out, "train", h, cfg["seed"], time.perf_counter() - t0,
                    ["checkpoint.npz", "train_metrics.csv"])
    return ["checkpoint.npz", "train_metrics.csv", "train_curves.png"]


def predict_cloud(net, cloud: PointCloud, block_edge: float, block_size: int,
                  room_extent, K: int, seed: int) -> PredictiveSamples:
    """Cloud-level Monte Carlo class probabilities.

    Every point is predicted from its own features: each grid cell's points
    are shuffled and run through the network in ``block_size`` chunks, with
    the last chunk padded by wrapping the shuffle. Duplicate predictions
    from the padding are averaged per MC sample.
    """
    rng = np.random.default_rng(seed)
    lo = cloud.points[:, :2].min(axis=0)
    cell = np.floor((cloud.points[:, :2] - lo) / block_edge).astype(np.int64)
    keys, inverse = np.unique(cell, axis=0, return_inverse=True)
    n, m = len(cloud), net.config.n_classes
    acc = np.zeros((K, n, m), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    chunk_i = 0
    for b, key in enumerate(keys):
        idx = np.nonzero(inverse == b)[0]
        origin = (float(lo[0] + key[0] * block_edge),
                  float(lo[1] + key[1] * block_edge))
        perm = rng.permutation(idx)
        n_chunks = max(1, -(-len(perm) // block_size))
        for chunk in np.resize(perm, n_chunks * block_size).reshape(n_chunks, -1):
            feats = torch.from_numpy(segnet.block_features(
                cloud.points[chunk], origin, block_edge, room_extent))
            samples = segnet.predict_mc(net, feats, K=K, seed=seed * 7919 + chunk_i)
            chunk_i += 1
            np.add.at(acc, (slice(None), chunk), samples.probs)
            np.add.at(counts, chunk, 1)
    acc /= counts[None, :, None]
    acc /= acc.sum(axis=2, keepdims=True)
    return PredictiveSamples(acc)


def stage_segment(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """Segment the held-out tacts with the trained network."""
    h = _hash(cfg, "synth", "segnet")
    if not force and _fresh(out, "segment", h):
        return []
    t0 = time.perf_counter()
    ckpt = out / "checkpoint.npz"
    if not ckpt.exists():
        raise StageError("checkpoint missing; run train first")
    net = segnet.load_checkpoint(ckpt)
    sg = cfg["segnet"]
    artifacts = []
    _, test_tacts = _tact_split(cfg)
    for tact in test_tacts:
        cloud = _load_tact(cfg, out, tact)
        down = downsample_voxel(cloud, sg["voxel"]) if sg["voxel"] > 0 else cloud
        with np.load(out / f"tact_{tact:02d}_gt.npz") as gt:
            # map ground-truth instance ids onto the downsampled cloud
            _, src = cKDTree(cloud.points).query(down.points)
            instances = gt["instances"][src]
        samples = predict_cloud(net, down, sg["block_edge"], sg["block_size"],
                                _room_extent(cfg), sg["mc_samples"], cfg["seed"] + tact)
        pred = uncertainty.predict_class(samples)
        seg_path = out / f"seg_{tact:02d}.npz"
        np.savez_compressed(seg_path, points=down.points,
                            probs=samples.probs.astype(np.float32),
                            pred=pred, gt_labels=np.asarray(down.labels),
                            gt_instances=instances)
        save_cloud(down.with_labels(pred), out / f"seg_{tact:02d}.xyzl")
        artifacts += [seg_path.name, f"seg_{tact:02d}.xyzl"]
    _write_manifest(out, "segment", h, cfg["seed"], time.perf_counter() - t0, artifacts)
    return artifacts


def _load_segmentation(out: Path, tact: int) -> dict:
    path = out / f"seg_{tact:02d}.npz"
    if not path.exists():
        raise StageError(f"missing upstream artifact {path.name}; run segment first")
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def stage_uncertainty(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """Per-point uncertainty reports and retained-accuracy summary."""
    h = _hash(cfg, "synth", "segnet", "uncertainty")
    if not force and _fresh(out, "uncertainty", h):
        return []
    t0 = time.perf_counter()
    k_sigma = cfg["uncertainty"]["k_sigma"]
    artifacts = []
    summary_rows = []
    _, test_tacts = _tact_split(cfg)
    for tact in test_tacts:
        seg = _load_segmentation(out, tact)
        probs = seg["probs"].astype(np.float64)
        probs /= probs.sum(axis=2, keepdims=True)
        samples = PredictiveSamples(probs)
        rep = uncertainty.report(samples, k_sigma=k_sigma)
        pred, gt = seg["pred"], seg["gt_labels"]
        correct = pred == gt
        baseline = float(correct.mean())
        rows = []
        for i in range(samples.n_points):
            rows.append([i, float(rep["u_pred"][i]), float(rep["u_alea"][i]),
                         float(rep["u_ep"][i]), float(rep["var"][i]),
                         int(rep["ci_certain"][i]), int(rep["flag_pred"][i]),
                         int(rep["flag_alea"][i]), int(rep["flag_ep"][i]),
                         int(rep["flag_var"][i])])
        csv_path = out / f"uncertainty_{tact:02d}.csv"
        _write_csv(csv_path, ["point_id", "u_pred", "u_alea", "u_ep", "var",
                              "ci_certain", "flag_pred", "flag_alea", "flag_ep",
                              "flag_var"], rows)
        flags = {"predictive": rep["flag_pred"], "aleatoric": rep["flag_alea"],
                 "epistemic": rep["flag_ep"], "variance": rep["flag_var"],
                 "credible": ~rep["ci_certain"]}
        for method, uncertain in flags.items():
            kept = ~uncertain
            retained = float(correct[kept].mean()) if kept.any() else baseline
            summary_rows.append([tact, method, baseline, retained,
                                 float(uncertain.mean() * 100.0)])
        np.savez(out / f"unc_{tact:02d}.npz",
                 **{f"flag_{k}": v for k, v in flags.items()})
        try:
            thr = rep["u_pred"].mean() + k_sigma * rep["u_pred"].std(ddof=1)
            figures.save_uncertainty_histogram(rep["u_pred"], thr,
                                               out / f"uncertainty_{tact:02d}.png")
        except Exception:
            pass
        artifacts += [csv_path.name, f"unc_{tact:02d}.npz"]
    summary_path = out / "uncertainty_summary.csv"
    _write_csv(summary_path,
               ["tact", "method", "baseline_acc", "retained_acc", "dropped_pct"],
               summary_rows)
    artifacts.append(summary_path.name)
    _write_manifest(out, "uncertainty", h, cfg["seed"], time.perf_counter() - t0,
                    artifacts)
    return artifacts


def stage_cluster(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """Instance clustering report per class, scored against ground truth."""
    h = _hash(cfg, "synth", "segnet", "cluster")
    if not force and _fresh(out, "cluster", h):
        return []
    t0 = time.perf_counter()
    cl = cfg["cluster"]
    params = {k: v for k, v in cl.items() if k not in ("method", "classes")}
    rows = []
    artifacts = []
    _, test_tacts = _tact_split(cfg)
    for tact in test_tacts:
        seg = _load_segmentation(out, tact)
        cloud = PointCloud(seg["points"], labels=seg["pred"])
        for name in cl["classes"]:
            class_index = synth.CLASS_INDEX[name]
            mask = seg["pred"] == class_index
            if not mask.any():
                continue
            assignment = clustering.run_method(seg["points"][mask], cl["method"],
                                               seed=cfg["seed"], **params)
            gt_inst = seg["gt_instances"][mask]
            mistakes = _cluster_mistakes(assignment, gt_inst)
            rows.append([f"tact{tact:02d}/{name}", int(mask.sum()), cl["method"],
                         mistakes * 100.0,
                         float(assignment.uncertain.mean() * 100.0),
                         float(assignment.runtime)])
            try:
                fig_path = out / f"cluster_{tact:02d}_{name}.png"
                figures.save_cluster_scatter(seg["points"][mask],
                                             assignment.labels, fig_path,
                                             title=f"tact {tact} / {name}")
                artifacts.append(fig_path.name)
            except Exception:
                pass
    report_path = out / "cluster_report.csv"
    _write_csv(report_path, ["class", "n_points", "method", "mistakes_pct",
                             "uncertain_pct", "time_s"], rows)
    _write_manifest(out, "cluster", h, cfg["seed"], time.perf_counter() - t0,
                    [report_path.name])
    return [report_path.name] + artifacts


def _cluster_mistakes(assignment: clustering.ClusterAssignment,
                      gt_instances: np.ndarray) -> float:
    """Fraction of clustered (non-noise) points not matching their cluster's
    majority ground-truth instance."""
    labels = assignment.labels
    clustered = (labels != clustering.NOISE) & ~assignment.uncertain
    if not clustered.any():
        return 0.0
    wrong = 0
    for cid in range(assignment.n_clusters):
        sel = clustered & (labels == cid)
        if not sel.any():
            continue
        inst = gt_instances[sel]
        _, counts = np.unique(inst, return_counts=True)
        wrong += int(len(inst) - counts.max())
    return wrong / int(clustered.sum())


def stage_pose(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """Cluster instances per class and estimate every object pose."""
    h = _hash(cfg, "synth", "segnet", "cluster", "pose")
    if not force and _fresh(out, "pose", h):
        return []
    t0 = time.perf_counter()
    cl, po = cfg["cluster"], cfg["pose"]
    params = PoseParams(ransac_iter=po["ransac_iter"], inlier_tol=po["inlier_tol"],
                        seed=cfg["seed"])
    cluster_params = {k: v for k, v in cl.items() if k not in ("method", "classes")}
    references = {name: synth.sample_reference(name, po["reference_density"])
                  for name in synth.CLASS_NAMES
                  if name not in ("floor", "ceiling", "wall")}
    results = []
    failures = []
    _, test_tacts = _tact_split(cfg)
    for tact in test_tacts:
        seg = _load_segmentation(out, tact)
        cloud = PointCloud(seg["points"], labels=seg["pred"])
        poses, fails = estimate_all(cloud, synth.class_map(), references,
                                    method=cl["method"], params=params,
                                    cluster_params=cluster_params)
        results.append((tact, poses))
        failures += [f"tact{tact:02d}: {f}" for f in fails]
    payload = {
        "failures": failures,
        "tacts": [{"tact": tact,
                   "poses": [p.__dict__ for p in poses]} for tact, poses in results],
    }
    (out / "poses.json").write_text(json.dumps(payload, indent=2) + "\n")
    rows = []
    for tact, poses in results:
        for p in poses:
            rows.append([tact, p.class_name, p.instance_id, p.x_mm, p.y_mm, p.z_mm,
                         p.roll_deg, p.pitch_deg, p.yaw_deg])
    _write_csv(out / "poses.csv",
               ["tact", "class", "instance", "x_mm", "y_mm", "z_mm",
                "roll_deg", "pitch_deg", "yaw_deg"], rows)
    _write_manifest(out, "pose", h, cfg["seed"], time.perf_counter() - t0,
                    ["poses.json", "poses.csv"])
    return ["poses.json", "poses.csv"]


def stage_export(cfg: dict, out: Path, force: bool = False) -> list[str]:
    """AML scene model per held-out tact from the estimated poses."""
    h = _hash(cfg, "synth", "segnet", "cluster", "pose", "export")
    if not force and _fresh(out, "export", h):
        return []
    t0 = time.perf_counter()
    poses_path = out / "poses.json"
    if not poses_path.exists():
        raise StageError("poses.json missing; run pose first")
    payload = json.loads(poses_path.read_text())
    from plantscan.poses import ObjectPose
    artifacts = []
    for entry in payload["tacts"]:
        poses = tuple(ObjectPose(**p) for p in entry["poses"])
        name = f"{cfg['export']['name']}_tact{entry['tact']:02d}"
        path = out / f"{name}.aml"
        aml.write_aml(aml.SceneModel(name, poses, source="estimated"), path)
        artifacts.append(path.name)
    _write_manifest(out, "export", h, cfg["seed"], time.perf_counter() - t0, artifacts)
    return artifacts


def stage_quality(measured_path, reference_path, out: Path) -> dict:
    """Accuracy/completeness/density of a measured cloud vs a reference."""
    measured = load_cloud(measured_path)
    reference = load_cloud(reference_path)
    result = {
        "accuracy_mm": metrics.accuracy(measured, reference),
        "completeness": metrics.completeness(measured, reference),
        "density": metrics.density(measured),
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "quality.csv", ["metric", "value"],
               [[k, float(v)] for k, v in result.items()])
    try:
        from plantscan.spatial import SpatialIndex
        dist, _ = SpatialIndex(reference.points).nearest(measured.points)
        figures.save_quality_histogram(dist * 1000.0, 10.0, out / "quality.png")
    except Exception:
        pass
    return result


def run_all(cfg: dict, out: Path, force: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stage_synth(cfg, out, force)
    stage_train(cfg, out, force)
    stage_segment(cfg, out, force)
    stage_uncertainty(cfg, out, force)
    stage_cluster(cfg, out, force)
    stage_pose(cfg, out, force)
    stage_export(cfg, out, force)

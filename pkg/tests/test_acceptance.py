"""End-to-end acceptance checks: correctness oracles, desk-scale training,
pose recovery, determinism and export round-trips."""

import time

import numpy as np
import pytest
import torch

from oracles import same_dbscan_result
from plantscan import clustering, pipeline, segnet, synth, uncertainty
from plantscan.aml import (SavingsInput, SceneModel, compute_savings,
                           parse_aml, write_aml)
from plantscan.cloud import PointCloud, downsample_voxel, partition_blocks
from plantscan.metrics import accuracy, completeness, density
from plantscan.poses import ObjectPose, pose_from_transform
from plantscan.registration import icp, ransac_align
from plantscan.segnet import (NetworkConfig, SegmentationNet, TrainConfig,
                              elbo_loss)
from plantscan.uncertainty import (PredictiveSamples, aleatoric_uncertainty,
                                   epistemic_uncertainty,
                                   predictive_uncertainty)


# ---------------------------------------------------------------------------
# 1. Analytic gradients of the variational loss vs central finite differences
# ---------------------------------------------------------------------------

def test_variational_loss_gradients_match_finite_differences():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = NetworkConfig(mode="bayesian", n_classes=3, n_features=6,
                        encoder_widths=(8,), global_width=8, head_widths=(),
                        n_pts=12)
    net = SegmentationNet(cfg).double()
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.uniform(-1.0, 1.0, (2, 12, 6)))
    y = torch.from_numpy(rng.integers(0, 3, (2, 12)))
    gen = torch.Generator().manual_seed(1)
    eps = [(ew.double(), eb.double()) for ew, eb in net.sample_eps(gen)]
    kl_weight = 0.37

    loss = elbo_loss(net, x, y, kl_weight, eps=eps)
    loss.backward()

    h = 1e-4
    checked = 0
    with torch.no_grad():
        for param in net.parameters():
            grad = param.grad
            flat = param.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(elbo_loss(net, x, y, kl_weight, eps=eps))
                flat[i] = orig - h
                down = float(elbo_loss(net, x, y, kl_weight, eps=eps))
                flat[i] = orig
                fd = (up - down) / (2 * h)
                an = float(grad.view(-1)[i])
                denom = max(abs(fd), abs(an), 1e-6)
                assert abs(an - fd) / denom <= 1e-3, \
                    f"param {tuple(param.shape)}[{i}]: analytic {an} vs fd {fd}"
                checked += 1
    assert checked > 100
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------------------
# 2. Uncertainty identities on 10,000 random sample sets
# ---------------------------------------------------------------------------

def test_uncertainty_identities_hold_on_random_samples():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for i in range(10_000):
        K = 1 if i % 10 == 0 else int(rng.integers(2, 5))
        n = int(rng.integers(1, 5))
        m = int(rng.integers(2, 5))
        g = rng.gamma(0.7, 1.0, (K, n, m)) + 1e-12
        s = PredictiveSamples(g / g.sum(axis=2, keepdims=True))
        u_pred = predictive_uncertainty(s)
        u_alea = aleatoric_uncertainty(s)
        u_ep = epistemic_uncertainty(s)
        assert u_alea.min() >= -1e-9
        assert (u_pred - u_alea).min() >= -1e-9
        assert u_pred.max() <= np.log(m) + 1e-9
        assert np.abs(u_ep - np.maximum(u_pred - u_alea, 0.0)).max() <= 1e-12
        if K == 1:
            assert np.array_equal(u_pred, u_alea)
    assert time.perf_counter() - t0 < 5.0


# ---------------------------------------------------------------------------
# 3 + 4. Desk-scale training, held-out accuracy and uncertainty filtering
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run():
    """Train both network modes on the standard synthetic split and predict
    Monte Carlo class probabilities for the held-out stations."""
    t0 = time.perf_counter()
    cfg = pipeline.merge_config({})
    sg = cfg["synth"]
    room = (sg["tact_length"], sg["tact_width"], sg["tact_height"])
    net_p = cfg["segnet"]

    train_x, train_y, test_clouds = [], [], []
    for tact in range(sg["n_tacts"]):
        spec = synth.SceneSpec(
            seed=tact, tact_length=sg["tact_length"],
            tact_width=sg["tact_width"], tact_height=sg["tact_height"],
            noise_sigma=sg["noise_sigma"],
            occlusion_fraction=sg["occlusion_fraction"],
            points_per_m2=sg["points_per_m2"])
        cloud, _ = synth.generate_scene(spec)
        down = downsample_voxel(cloud, net_p["voxel"])
        if tact < sg["n_tacts"] - sg["held_out"]:
            blocks = partition_blocks(down, net_p["block_edge"],
                                      net_p["block_size"], seed=tact)
            x, y = segnet.blocks_to_tensors(down, blocks, net_p["block_edge"],
                                            room)
            train_x.append(x)
            train_y.append(y)
        else:
            test_clouds.append(down)
    x, y = torch.cat(train_x), torch.cat(train_y)

    nets = {}
    for mode in ("bayesian", "frequentist"):
        net_cfg = NetworkConfig(mode=mode, n_classes=len(synth.CLASS_NAMES),
                                n_pts=net_p["block_size"])
        train_cfg = TrainConfig.for_mode(mode, epochs=net_p["epochs"],
                                         batch_size=net_p["batch_size"], seed=0)
        nets[mode], _ = segnet.train(train_cfg, net_cfg, x, y)

    samples = {}
    for mode, K in (("bayesian", 20), ("frequentist", 1)):
        samples[mode] = [
            pipeline.predict_cloud(nets[mode], down, net_p["block_edge"],
                                   net_p["block_size"], room, K=K,
                                   seed=100 + i)
            for i, down in enumerate(test_clouds)]
    return {"test_clouds": test_clouds, "samples": samples,
            "elapsed": time.perf_counter() - t0}


def _held_out_accuracy(desk, mode):
    correct = total = 0
    for down, s in zip(desk["test_clouds"], desk["samples"][mode]):
        pred = uncertainty.predict_class(s)
        correct += int((pred == down.labels).sum())
        total += len(down)
    return correct / total


def test_desk_scale_segmentation_accuracy(desk_run):
    bayes = _held_out_accuracy(desk_run, "bayesian")
    freq = _held_out_accuracy(desk_run, "frequentist")
    assert bayes >= 0.90, f"held-out accuracy {bayes:.4f}"
    assert bayes >= freq - 0.01, f"bayesian {bayes:.4f} vs frequentist {freq:.4f}"
    assert desk_run["elapsed"] < 1800.0


def test_uncertainty_filtering_keeps_or_raises_accuracy(desk_run):
    for down, s in zip(desk_run["test_clouds"], desk_run["samples"]["bayesian"]):
        rep = uncertainty.report(s)
        pred = uncertainty.predict_class(s)
        correct = pred == np.asarray(down.labels)
        baseline = correct.mean()
        flags = {"predictive": rep["flag_pred"], "aleatoric": rep["flag_alea"],
                 "epistemic": rep["flag_ep"], "variance": rep["flag_var"],
                 "credible": ~rep["ci_certain"]}
        for method, uncertain in flags.items():
            kept = ~uncertain
            assert kept.any()
            retained = correct[kept].mean()
            assert retained >= baseline, \
                f"{method}: retained {retained:.4f} < baseline {baseline:.4f}"
        dropped = rep["flag_pred"].mean()
        assert 0.005 <= dropped <= 0.12, f"entropy drop fraction {dropped:.4f}"


# ---------------------------------------------------------------------------
# 5. Clustering: brute-force oracle, exact instance recovery, runtime order
# ---------------------------------------------------------------------------

def test_dbscan_matches_brute_force_on_random_clouds():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(20, 301))
        pts = rng.uniform(0, 1, (n, 3)) * rng.uniform(0.5, 2.0)
        eps = float(rng.uniform(0.05, 0.35))
        min_pts = int(rng.integers(2, 10))
        got = clustering.dbscan(pts, eps, min_pts)
        assert same_dbscan_result(got.labels, pts, eps, min_pts)


def _instance_errors(assign, gt_instances):
    ok = assign.labels != clustering.NOISE
    wrong = 0
    for cid in range(assign.n_clusters):
        sel = ok & (assign.labels == cid)
        if sel.any():
            _, counts = np.unique(gt_instances[sel], return_counts=True)
            wrong += int(sel.sum() - counts.max())
    return wrong


def test_density_methods_recover_exact_instance_counts():
    for seed in range(3):
        spec = synth.SceneSpec(seed=seed, occlusion_fraction=0.0)
        cloud, gt = synth.generate_scene(spec)
        for name in ("car", "hanger"):
            mask = cloud.labels == synth.CLASS_INDEX[name]
            pts = cloud.points[mask]
            inst = gt.point_instances[mask]
            db = clustering.dbscan(pts, eps=0.25, min_pts=8)
            assert db.n_clusters == 2, f"{name} seed {seed}: {db.n_clusters}"
            assert _instance_errors(db, inst) == 0
            op = clustering.optics(pts, min_pts=20, xi=0.3)
            assert op.n_clusters == 2, f"{name} seed {seed}: {op.n_clusters}"
            assert _instance_errors(op, inst) == 0


def test_clustering_runtime_ordering_on_large_cloud():
    rng = np.random.default_rng(0)
    centers = rng.uniform(0, 30, (6, 3))
    pts = np.concatenate([c + rng.normal(0, 1.0, (5000, 3)) for c in centers])
    runtimes = {
        "kmeans": clustering.kmeans(pts, 6, seed=0).runtime,
        "dbscan": clustering.dbscan(pts, 0.25, 8).runtime,
        "optics": clustering.optics(pts, 8, 0.05, max_eps=0.15).runtime,
        "spectral": clustering.spectral(pts, 6, seed=0).runtime,
    }
    assert runtimes["kmeans"] < runtimes["dbscan"] < runtimes["optics"] \
        < runtimes["spectral"], runtimes


# ---------------------------------------------------------------------------
# 6. Pose recovery, exact and under noise + occlusion
# ---------------------------------------------------------------------------

def _estimate(reference, instance, seed):
    coarse, _ = ransac_align(reference, instance, n_iter=1536, seed=seed)
    tf, _, history = icp(reference, instance, init=coarse, max_iter=200)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:])), \
        "RMS history increased"
    return pose_from_transform(tf, "car", 0)


def _angle_diff(a, b):
    return abs((a - b + 180.0) % 360.0 - 180.0)


def test_pose_recovery_is_exact_without_noise():
    ref = synth.sample_reference("car", 600.0)
    for seed in range(3):
        rng = np.random.default_rng(seed)
        true = ObjectPose("car", 0, *rng.uniform(-2000, 2000, 3),
                          0.0, 0.0, float(rng.uniform(-180, 180)))
        instance = PointCloud(true.transform().apply(ref.points))
        est = _estimate(ref, instance, seed)
        for attr in ("x_mm", "y_mm", "z_mm"):
            assert abs(getattr(est, attr) - getattr(true, attr)) <= 1e-3
        for attr in ("roll_deg", "pitch_deg", "yaw_deg"):
            assert _angle_diff(getattr(est, attr), getattr(true, attr)) <= 1e-3


def test_pose_recovery_under_noise_and_occlusion():
    ref = synth.sample_reference("car", 600.0)
    sampled = synth.sample_reference("car", 300.0).points
    dt = np.zeros((20, 3))
    da = np.zeros((20, 3))
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        true = ObjectPose("car", 0, *rng.uniform(-2000, 2000, 3),
                          0.0, 0.0, float(rng.uniform(-180, 180)))
        pts = true.transform().apply(sampled)
        scanner = pts.mean(axis=0) + rng.uniform(-3, 3, 3)
        keep = synth.occlusion_mask(pts, 0.2, rng, scanner)
        pts = pts[keep] + rng.normal(0.0, 0.001, (int(keep.sum()), 3))
        est = _estimate(ref, PointCloud(pts), seed=trial)
        dt[trial] = [abs(est.x_mm - true.x_mm), abs(est.y_mm - true.y_mm),
                     abs(est.z_mm - true.z_mm)]
        da[trial] = [_angle_diff(est.roll_deg, true.roll_deg),
                     _angle_diff(est.pitch_deg, true.pitch_deg),
                     _angle_diff(est.yaw_deg, true.yaw_deg)]
    assert (dt.mean(axis=0) <= 25.0).all(), dt.mean(axis=0)
    assert (da.mean(axis=0) <= 0.5).all(), da.mean(axis=0)


# ---------------------------------------------------------------------------
# 7. Quality metrics equal brute force
# ---------------------------------------------------------------------------

def test_metrics_equal_brute_force_on_many_pairs():
    rng = np.random.default_rng(0)
    for _ in range(500):
        meas = rng.uniform(0, 1, (int(rng.integers(2, 30)), 3))
        ref = rng.uniform(0, 1, (int(rng.integers(2, 30)), 3))
        d_mm = np.linalg.norm(meas[:, None, :] - ref[None, :, :],
                              axis=2).min(axis=1) * 1000.0
        tol = float(rng.uniform(1, 100))
        r = float(rng.uniform(10, 200))
        assert abs(accuracy(PointCloud(meas), PointCloud(ref))
                   - np.sqrt(np.mean(d_mm ** 2))) <= 1e-9
        assert abs(completeness(PointCloud(meas), PointCloud(ref), tol)
                   - np.mean(d_mm <= tol)) <= 1e-9
        pair = np.linalg.norm(meas[:, None, :] - meas[None, :, :],
                              axis=2) * 1000.0
        counts = (pair <= r).sum(axis=1) - 1
        assert abs(density(PointCloud(meas), r) - counts.mean()) <= 1e-9


def test_accuracy_worked_example():
    ref = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    meas = PointCloud(np.array([[0.003, 0, 0], [1.0, 0.004, 0]]))
    assert accuracy(meas, ref) == pytest.approx(3.5355, abs=1e-4)


# ---------------------------------------------------------------------------
# 8. Savings calculator reference values
# ---------------------------------------------------------------------------

def test_savings_reference_values():
    result = compute_savings(SavingsInput(
        cost_per_m2=1.5, area_per_plant=950_000.0, scanned_fraction=0.6,
        n_plants=10, scans_per_year=1.0, automation_degree=0.7))
    assert result["total_cost_per_year"] == pytest.approx(8_550_000.0, abs=1e-6)
    assert result["savings_per_year"] == pytest.approx(5_985_000.0, abs=1e-6)


# ---------------------------------------------------------------------------
# 9. Full-pipeline determinism
# ---------------------------------------------------------------------------

def test_pipeline_runs_are_byte_identical(tmp_path):
    cfg = pipeline.merge_config({
        "seed": 1,
        "synth": {"n_tacts": 3, "held_out": 1, "points_per_m2": 40.0},
        "segnet": {"epochs": 2, "block_size": 512, "mc_samples": 4},
        "cluster": {"method": "dbscan", "eps": 0.25, "min_pts": 8},
        "pose": {"ransac_iter": 512, "inlier_tol": 0.05,
                 "reference_density": 300.0},
    })
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    pipeline.run_all(cfg, out_a, force=True)
    pipeline.run_all(cfg, out_b, force=True)
    compared = 0
    for path_a in sorted(out_a.iterdir()):
        if path_a.suffix not in (".aml", ".csv"):
            continue
        path_b = out_b / path_a.name
        assert path_b.exists(), path_a.name
        assert path_a.read_bytes() == path_b.read_bytes(), path_a.name
        compared += 1
    assert compared >= 5


# ---------------------------------------------------------------------------
# 10. Scene-model export round trip
# ---------------------------------------------------------------------------

def test_aml_round_trip_is_drift_free(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "m.aml"
    for i in range(1000):
        poses = tuple(
            ObjectPose(str(rng.choice(["car", "hanger", "column", "band"])),
                       int(j), float(rng.uniform(-1e5, 1e5)),
                       float(rng.uniform(-1e5, 1e5)),
                       float(rng.uniform(-1e5, 1e5)),
                       float(rng.uniform(-180, 180)),
                       float(rng.uniform(-90, 90)),
                       float(rng.uniform(-180, 180)))
            for j in range(int(rng.integers(0, 5))))
        model = SceneModel(f"scene_{i}", poses,
                           source=str(rng.choice(["estimated", "ground-truth"])))
        write_aml(model, path)
        back = parse_aml(path)
        assert back.name == model.name and back.source == model.source
        assert back.euler == model.euler and back.origin == model.origin
        assert len(back.poses) == len(model.poses)
        for a, b in zip(back.poses, model.poses):
            assert a.class_name == b.class_name
            assert a.instance_id == b.instance_id
            for attr in ("x_mm", "y_mm", "z_mm", "roll_deg", "pitch_deg",
                         "yaw_deg"):
                assert abs(getattr(a, attr) - getattr(b, attr)) <= 1e-6

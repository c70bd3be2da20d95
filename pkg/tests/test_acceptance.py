"""Top-level acceptance checks. Each test prints one ``ACCEPTANCE <name>: PASS|FAIL`` line."""

import json
import math
import os

import numpy as np
import pytest
import torch

from conftest import fixture_path, toy_model_config
from morphgrasp.cli import main
from morphgrasp.errors import UnsupportedJointKind
from morphgrasp.gradcheck import COMPONENTS, THRESHOLD, timed_gradcheck
from morphgrasp.grasp_data import Cache, GraspRecord, Manifest, prepare_caches
from morphgrasp.ik import ik_fit
from morphgrasp.mesh_geometry import knn_graph, min_volume_obb
from morphgrasp.metrics import diversity_metric
from morphgrasp.model import ContactNet, contact_maps, geometric_embedding_loss, predicted_contact_loss, tiny_config
from morphgrasp.toy import make_toy_dataset, write_toy_dataset
from morphgrasp.training import TrainConfig, collate, evaluate_contact_loss, load_samples, train
from morphgrasp.urdf_morph import forward_kinematics, load_urdf, parse_urdf
from test_ik import BARRETT_LINKS, perturbed, random_grasp, world_of
from test_mesh_geometry import grid_obb_volume, random_rotation
from test_model import make_batch
from test_urdf_morph import FIXTURE_URDFS, chain_urdf, fixture_graph, raw_counts

PROBE_HOLDOUT = "toy9"
PROBE_EPOCHS = 80


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, f"{name}: {detail}"

    return report


def test_gradient_fidelity(verdict):
    report, elapsed = timed_gradcheck()
    worst = max(report, key=report.get)
    ok = set(report) == set(COMPONENTS) and all(v < THRESHOLD for v in report.values()) and elapsed < 60
    verdict("gradient-fidelity", ok, f"(worst {worst} {report[worst]:.2e}, {elapsed:.1f}s)")


def test_padding_invariance(verdict):
    cfg = tiny_config(N=3)
    small = make_batch(cfg, seed=5)
    big = make_batch(cfg, seed=5, pad_to=cfg.S_M + 24)
    m_small, m_big = ContactNet(cfg), ContactNet(tiny_config(N=3, S_M=cfg.S_M + 24))
    with torch.no_grad():
        _, _, F_small = m_small.encode(small)
        _, _, F_big = m_big.encode(big)
        exact = torch.equal(F_big[:, : cfg.S_M], F_small)
        delta = (m_big(big).F_O_hat - m_small(small).F_O_hat).abs().max().item()
    verdict("padding-invariance", exact and delta < 1e-9, f"(encoder bit-identical {exact}, max dF_O_hat {delta:.1e})")


def test_residual_identity(verdict):
    cfg = tiny_config(N=3, zero_init_output=True)
    batch = make_batch(cfg, seed=6)
    with torch.no_grad():
        out = ContactNet(cfg)(batch)
        baseline = contact_maps(out.F_O, out.F_G, batch["keypoint_idx"])
    ok = torch.equal(out.F_O_hat, out.F_O) and torch.equal(out.F_M_hat, out.F_M) and \
        torch.equal(out.contact_maps, baseline)
    verdict("residual-identity", ok)


def test_overfit(verdict, overfit_run, toy_samples):
    steps = overfit_run.step_losses
    drop = 1 - steps[-1] / steps[0]
    with torch.no_grad():
        pred = overfit_run.model.predict(collate(toy_samples)).indices.numpy()
    gt = np.stack([s.arrays["gt_indices"] for s in toy_samples])
    hits = (pred == gt).sum(axis=1)
    ok = len(toy_samples) == 8 and len(steps) <= 500 and drop >= 0.9 and hits.min() >= 5 and overfit_run.elapsed < 600
    verdict("overfit", ok, f"(loss drop {drop:.1%} in {len(steps)} steps, hits {hits.tolist()}, "
                           f"{overfit_run.elapsed:.0f}s)")


@pytest.fixture(scope="module")
def probe_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("probe"))
    manifest = Manifest.load(write_toy_dataset(make_toy_dataset(0, num_grippers=10, grasps_per_pair=2), root))
    cfg = toy_model_config()
    prepare_caches(manifest, Cache(os.path.join(root, "cache")), cfg.S_O, cfg.S_M, cfg.knn_k, ("final",))
    return root


@pytest.mark.xfail(strict=False, reason="direction holds on some seeds only at toy scale; see README")
def test_morphology_probe(verdict, probe_root):
    manifest = Manifest.load(os.path.join(probe_root, "manifest.json"))
    cache = Cache(os.path.join(probe_root, "cache"))
    rows = []
    for seed in (0, 1, 2):
        losses = {}
        for variant in ("full", "point_cloud_only"):
            cfg = toy_model_config(variant=variant, seed=seed)
            train_s = load_samples(manifest, cache, cfg, holdout_grippers=[PROBE_HOLDOUT])
            test_s = [s for s in load_samples(manifest, cache, cfg) if s.gripper_id == PROBE_HOLDOUT]
            tc = TrainConfig(epochs=PROBE_EPOCHS, batch_size=8, lr=1e-3, seed=seed, lr_schedule="cosine")
            losses[variant] = evaluate_contact_loss(train(train_s, cfg, tc).model, test_s)
        rows.append((seed, losses["full"], losses["point_cloud_only"]))
    wins = [f < p for _, f, p in rows]
    detail = ", ".join(f"seed {s}: full {f:.3f} vs pcd {p:.3f}" for s, f, p in rows)
    verdict("morphology-probe", all(wins), f"({sum(wins)}/3 seeds; {detail})")


def test_geometry_oracles(verdict):
    notes, ok = [], True

    # k-NN against a full distance matrix
    for s, k, seed in ((1000, 8, 0), (257, 5, 1), (40, 12, 2)):
        pts = np.random.default_rng(seed).normal(size=(s, 3))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        np.fill_diagonal(d, np.inf)
        ref = np.argsort(d, axis=1, kind="stable")[:, :k]
        ok &= np.array_equal(knn_graph(pts, k).neighbors, ref)
    notes.append(f"knn {ok}")

    # OBB against the 2 degree rotation grid
    ratios = []
    for seed in range(2):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(150, 3)) * [0.05, 0.02, 0.01] @ random_rotation(seed).T
        grid, _ = grid_obb_volume(pts)
        ratios.append(min_volume_obb(pts).volume / grid)
    ok &= all(abs(r - 1) <= 0.05 for r in ratios)
    notes.append("obb/grid " + "/".join(f"{r:.3f}" for r in ratios))

    # planar two-link closed form
    tree = load_urdf(fixture_path("planar", "planar.urdf"))
    l1, l2 = 0.1, 0.07  # elbow offset, then a point l2 along the forearm x axis
    err = 0.0
    for t1, t2 in np.random.default_rng(3).uniform(-3, 3, size=(200, 2)):
        pos = (forward_kinematics(tree, None, {"shoulder": t1, "elbow": t2})["fore"] @ [l2, 0.0, 0.0, 1.0])[:3]
        ref = [l1 * math.cos(t1) + l2 * math.cos(t1 + t2), l1 * math.sin(t1) + l2 * math.sin(t1 + t2), 0.0]
        err = max(err, float(np.abs(pos - ref).max()))
    ok &= err < 1e-9
    notes.append(f"fk {err:.1e}")

    # loss anchors
    gt = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    bce = geometric_embedding_loss(torch.zeros_like(gt), gt).item()
    ce = predicted_contact_loss(torch.zeros(1, 6, 2048, dtype=torch.float64), torch.zeros(1, 6, dtype=torch.long)).item()
    ok &= abs(bce - math.log(2)) < 1e-9 and abs(ce - math.log(2048)) < 1e-9
    notes.append(f"ln2 {abs(bce - math.log(2)):.0e} ln2048 {abs(ce - math.log(2048)):.0e}")
    verdict("geometry-oracles", bool(ok), "(" + ", ".join(notes) + ")")


def test_parser_conformance(verdict):
    ok = True
    for name, (sub, fname) in sorted(FIXTURE_URDFS.items()):
        with open(fixture_path(sub, fname), encoding="utf-8") as fh:
            text = fh.read()
        tree = parse_urdf(text)
        ok &= (len(tree.links), len(tree.joints)) == raw_counts(text)
    rejected = 0
    for kind in ("continuous", "prismatic", "floating", "planar"):
        try:
            parse_urdf(chain_urdf(kind))
        except UnsupportedJointKind:
            rejected += 1
    ok &= rejected == 4
    stable = 0
    for name, (sub, _) in sorted(FIXTURE_URDFS.items()):
        with open(fixture_path(sub, "morph_final.json"), encoding="utf-8") as fh:
            golden = fh.read()
        first, second = fixture_graph(name, "final")[1].dumps(), fixture_graph(name, "final")[1].dumps()
        stable += first == second == golden
    ok &= stable == len(FIXTURE_URDFS)
    verdict("parser-conformance", bool(ok), f"({len(FIXTURE_URDFS)} fixtures, {rejected}/4 rejected, "
                                            f"{stable} golden files stable)")


def test_ik_round_trip(verdict):
    tree = load_urdf(fixture_path("barrett", "barrett_style.urdf"))
    local = np.random.default_rng(0).uniform(-0.01, 0.01, size=(len(BARRETT_LINKS), 3))
    worst = 0.0
    for seed in range(10, 16):
        rng = np.random.default_rng(seed)
        truth = random_grasp(tree, rng)
        targets = world_of(tree, BARRETT_LINKS, local, truth)
        worst = max(worst, ik_fit(tree, BARRETT_LINKS, local, targets, perturbed(tree, truth, rng)).rms)
    verdict("ik-round-trip", worst < 1e-4, f"(worst rms {worst:.1e} m over 6 poses)")


def test_diversity_metric(verdict):
    angles = np.random.default_rng(9).uniform(-1.2, 1.2, size=(7, 5))
    records = [GraspRecord("g", "o", np.zeros(3), [1.0, 0.0, 0.0, 0.0], a) for a in angles]
    per, mean = diversity_metric(records)
    hand = []
    for j in range(5):
        col = [float(a) for a in angles[:, j]]
        mu = sum(col) / len(col)
        hand.append(math.sqrt(sum((c - mu) ** 2 for c in col) / len(col)))
    _, extremes = diversity_metric([GraspRecord("g", "o", np.zeros(3), [1.0, 0, 0, 0], [a]) for a in (0.0, math.pi / 2)])
    err = max(float(np.abs(per - hand).max()), abs(mean - sum(hand) / 5), abs(extremes - math.pi / 4))
    verdict("diversity-metric", err < 1e-12, f"(max error {err:.1e})")


def test_train_determinism(verdict, toy_root, tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifest": os.path.join(toy_root, "manifest.json"),
                               "cache": os.path.join(toy_root, "cache"), "model": toy_model_config().to_dict(),
                               "train": {"epochs": 3, "batch_size": 4, "lr": 1e-3, "lr_schedule": "cosine"}}))
    codes = [main(["train", str(cfg), str(tmp_path / d)]) for d in ("a", "b")]
    same = [(tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
            for rel in ("checkpoints/final.ckpt", "loss.txt")]
    verdict("train-determinism", codes == [0, 0] and all(same), f"(checkpoint identical {same[0]}, "
                                                                 f"loss log identical {same[1]})")

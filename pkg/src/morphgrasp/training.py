"""Training loop, sample assembly from caches, and contact inference + grasp fitting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import tensor_nn as tnn
from .errors import ConfigMismatch, EmptyDataset
from .grasp_data import (
    CONTACT_EPSILON,
    Cache,
    GraspRecord,
    GripperAssets,
    Manifest,
    read_grasps,
)
from .ik import IKResult, ik_fit, kabsch, rest_grasp
from .mesh_geometry import knn_graph
from .model import ContactNet, ModelConfig, keypoint_rows

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = tnn.ADAM_LR
    beta1: float = tnn.ADAM_BETAS[0]
    beta2: float = tnn.ADAM_BETAS[1]
    eps: float = tnn.ADAM_EPS
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    holdout_grippers: list[str] = field(default_factory=list)
    holdout_objects: list[str] = field(default_factory=list)
    checkpoint_every: int = 0
    epsilon: float = CONTACT_EPSILON
    init_checkpoint: str | None = None
    lr_schedule: str = "constant"  # or "cosine": anneal to zero over the run

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    gripper_id: str
    object_id: str
    arrays: dict[str, np.ndarray]


@dataclass
class TrainResult:
    model: ContactNet
    curve: list[tuple[int, float, float, float]]
    step_losses: list[float]
    checkpoint: str | None = None


# ----------------------------------------------------------------------------
# samples


def make_sample(gripper_id, object_id, obj_points, obj_adj, grip_points, grip_adj, morph, kp, gt=None) -> Sample:
    arrays = {
        "obj_points": obj_points,
        "obj_adj": obj_adj,
        "grip_points": grip_points,
        "grip_adj": grip_adj,
        "morph_feats": morph.node_features,
        "morph_adj": morph.adjacency,
        "keypoint_idx": np.asarray(kp.gripper_point_index, dtype=np.int64),
        "keypoint_rows": np.asarray(keypoint_rows(kp, morph.link_index), dtype=np.int64),
    }
    if gt is not None:
        arrays["gt_indices"] = np.asarray(gt.indices, dtype=np.int64)
        arrays["gt_maps"] = gt.maps
    return Sample(gripper_id, object_id, arrays)


def collate(samples: list[Sample]) -> dict:
    batch = {}
    for key in samples[0].arrays:
        stacked = np.stack([s.arrays[key] for s in samples])
        batch[key] = torch.from_numpy(stacked) if stacked.dtype == np.int64 else tnn.as_tensor(stacked)
    return batch


def _adjacency(points: np.ndarray, neighbors: np.ndarray | None, k: int) -> np.ndarray:
    if neighbors is None:
        return knn_graph(points, k).adjacency()
    s = len(points)
    adj = np.eye(s)
    rows = np.repeat(np.arange(s), neighbors.shape[1])
    adj[rows, neighbors.ravel()] = 1.0
    adj[neighbors.ravel(), rows] = 1.0
    return adj


def load_samples(manifest: Manifest, cache: Cache, config: ModelConfig,
                 holdout_grippers=(), holdout_objects=()) -> list[Sample]:
    """One sample per grasp record, skipping held-out grippers and objects before any cache read."""
    samples = []
    objects, grippers = {}, {}
    for gf in manifest.grasp_files:
        header, recs = read_grasps(gf)
        gid, oid = header["gripper_id"], header["object_id"]
        if gid in holdout_grippers or oid in holdout_objects:
            continue
        if gid not in manifest.grippers:
            raise ConfigMismatch(f"grasp file {gf} names unknown gripper {gid!r}")
        spec = manifest.grippers[gid]
        if spec.S_G != config.S_G:
            raise ConfigMismatch(f"gripper {gid!r} cloud has {spec.S_G} points, model expects {config.S_G}")
        if len(spec.keypoints) != config.N:
            raise ConfigMismatch(f"gripper {gid!r} has {len(spec.keypoints)} keypoints, model expects {config.N}")
        if oid not in objects:
            cf = cache.read_object(oid, config.S_O, config.knn_k)
            objects[oid] = (cf.points, _adjacency(cf.points, cf.neighbors, config.knn_k))
        if gid not in grippers:
            cf = cache.read_gripper(gid, config.S_G, config.knn_k)
            morph = cache.read_morph(gid, config.feature_set, config.S_M)
            grippers[gid] = (cf.points, _adjacency(cf.points, cf.neighbors, config.knn_k), morph)
        gts = cache.read_gt(gf, config.S_O)
        op, oa = objects[oid]
        gp, ga, morph = grippers[gid]
        for gt in gts:
            samples.append(make_sample(gid, oid, op, oa, gp, ga, morph, spec.keypoints, gt))
    return samples


# ----------------------------------------------------------------------------
# training


def build_model(config: ModelConfig, init_checkpoint: str | None = None) -> ContactNet:
    model = ContactNet(config)
    if config.freeze_policy in ("finetune", "freeze"):
        if init_checkpoint:
            _, tensors = tnn.read_checkpoint(init_checkpoint)
            loaded = tnn.load_parameters(model, tensors, prefixes=("enc_object.", "enc_gripper."))
            log.info("loaded %d point-encoder tensors from %s", len(loaded), init_checkpoint)
        else:
            log.warning("freeze policy %r without an initial checkpoint: point encoders keep their random init",
                        config.freeze_policy)
    model.apply_freeze_policy()
    return model


def encoder_hash(model: ContactNet) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if name.startswith(("enc_object.", "enc_gripper.")):
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def checkpoint_config(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {"model": model_config.to_dict(), "train": train_config.to_dict()}


def train(samples: list[Sample], model_config: ModelConfig, train_config: TrainConfig,
          run_dir: str | None = None, model: ContactNet | None = None, run_info: dict | None = None) -> TrainResult:
    """Adam over the trainable parameters; one loss line per epoch in ``run_dir/loss.txt``.

    ``run_info`` is stored verbatim under ``"run"`` in every checkpoint header.
    """
    held = set(train_config.holdout_grippers)
    held_o = set(train_config.holdout_objects)
    samples = [s for s in samples if s.gripper_id not in held and s.object_id not in held_o]
    if not samples:
        raise EmptyDataset("no training samples left after holdout filtering")
    torch.manual_seed(train_config.seed)
    if model is None:
        model = build_model(model_config, train_config.init_checkpoint)
    opt = tnn.make_adam(model.parameters(), train_config.lr, (train_config.beta1, train_config.beta2),
                        train_config.eps)
    sched = None
    if train_config.lr_schedule == "cosine":
        per_epoch = -(-len(samples) // train_config.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=train_config.epochs * per_epoch)
    rng = np.random.default_rng(train_config.seed)
    ckpt_cfg = checkpoint_config(model_config, train_config)
    if run_info:
        ckpt_cfg["run"] = run_info
    if run_dir:
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        loss_fh = open(os.path.join(run_dir, "loss.txt"), "w", encoding="utf-8")
        loss_fh.write("# epoch geometric contact total\n")
    else:
        loss_fh = None

    curve, step_losses = [], []
    try:
        for epoch in range(1, train_config.epochs + 1):
            order = rng.permutation(len(samples))
            sums = np.zeros(3)
            batches = 0
            for start in range(0, len(order), train_config.batch_size):
                batch = collate([samples[i] for i in order[start : start + train_config.batch_size]])
                opt.zero_grad(set_to_none=True)
                losses, _ = model.losses(batch, train_config.loss_weights)
                tnn.backward(losses["total"])
                tnn.adam_step(opt)
                if sched is not None:
                    sched.step()
                vals = [losses["geometric"].item(), losses["contact"].item(), losses["total"].item()]
                if not np.all(np.isfinite(vals)):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                step_losses.append(vals[2])
                sums += vals
                batches += 1
            geo, con, tot = (float(x) for x in sums / batches)
            curve.append((epoch, geo, con, tot))
            if loss_fh:
                loss_fh.write(f"{epoch} {geo!r} {con!r} {tot!r}\n")
                loss_fh.flush()
            if run_dir and train_config.checkpoint_every and epoch % train_config.checkpoint_every == 0:
                tnn.save_checkpoint(os.path.join(run_dir, "checkpoints", f"epoch_{epoch:04d}.ckpt"),
                                    model, ckpt_cfg, opt)
    finally:
        if loss_fh:
            loss_fh.close()

    final = None
    if run_dir:
        final = os.path.join(run_dir, "checkpoints", "final.ckpt")
        tnn.save_checkpoint(final, model, ckpt_cfg, opt)
    return TrainResult(model, curve, step_losses, final)


def load_model(checkpoint: str) -> tuple[ContactNet, dict]:
    header, tensors = tnn.read_checkpoint(checkpoint)
    cfg = ModelConfig.from_dict(header["config"]["model"])
    model = ContactNet(cfg)
    tnn.load_parameters(model, tensors)
    model.apply_freeze_policy()
    return model, header


@torch.no_grad()
def evaluate_contact_loss(model: ContactNet, samples: list[Sample]) -> float:
    """Mean predicted-contact cross-entropy (teacher forcing) over samples."""
    vals = []
    for s in samples:
        losses, _ = model.losses(collate([s]))
        vals.append(losses["contact"].item())
    return float(np.mean(vals))


# ----------------------------------------------------------------------------
# inference


@dataclass
class ContactResult:
    indices: np.ndarray
    coordinates: np.ndarray
    object_points: np.ndarray


def predict_contacts(model: ContactNet, object_points: np.ndarray, gripper: GripperAssets) -> ContactResult:
    c = model.config
    if len(object_points) != c.S_O:
        raise ConfigMismatch(f"object cloud has {len(object_points)} points, model expects {c.S_O}")
    if len(gripper.points) != c.S_G:
        raise ConfigMismatch(f"gripper cloud has {len(gripper.points)} points, model expects {c.S_G}")
    if len(gripper.spec.keypoints) != c.N:
        raise ConfigMismatch(f"gripper has {len(gripper.spec.keypoints)} keypoints, model expects {c.N}")
    if len(gripper.tree.links) > c.S_M:
        raise ConfigMismatch(f"gripper has {len(gripper.tree.links)} links, model graph holds {c.S_M}")
    morph = gripper.morphology(c.feature_set, c.S_M)
    sample = make_sample(gripper.spec.gripper_id, "", object_points, _adjacency(object_points, None, c.knn_k),
                         gripper.points, _adjacency(gripper.points, None, c.knn_k), morph, gripper.spec.keypoints)
    pred = model.predict(collate([sample]))
    idx = pred.indices[0].numpy().astype(np.int64)
    return ContactResult(idx, object_points[idx], object_points)


def fit_grasp(gripper: GripperAssets, targets: np.ndarray, object_id: str = "") -> IKResult:
    """IK fit of the gripper keypoints onto contact targets, initialised by rigid alignment at rest pose."""
    from .grasp_data import keypoint_world_positions
    from .urdf_morph import rest_pose

    kp = gripper.spec.keypoints
    local = gripper.keypoint_local()
    rest = keypoint_world_positions(gripper.tree, kp.link_name, local, np.eye(4), rest_pose(gripper.tree))
    rot, t = kabsch(rest, targets)
    init = rest_grasp(gripper.tree, gripper.spec.gripper_id, object_id, t, rot)
    return ik_fit(gripper.tree, kp.link_name, local, targets, init)


def grasp_to_dict(g: GraspRecord) -> dict:
    return {"gripper_id": g.gripper_id, "object_id": g.object_id, "translation": g.translation.tolist(),
            "rotation_wxyz": g.rotation.tolist(), "joint_angles": g.joint_angles.tolist()}


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")

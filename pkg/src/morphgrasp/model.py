"""Contact-prediction network: GCN encoders, residual cross-attention between
object and morphology, dot-product contact maps and autoregressive matching.

Embeddings are ``(B, S, n)`` tensors (one row per point / morphology node).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
from torch import nn

from . import tensor_nn as tnn
from .errors import InvalidKeypointIndex, MissingGroundTruth, ShapeMismatch, UnknownLink, VariantInputMismatch

VARIANTS = ("full", "point_cloud_only", "joints_only", "links_only")
FREEZE_POLICIES = ("scratch", "finetune", "freeze")


@dataclass
class ModelConfig:
    n: int = 512
    gcn_hidden: int = 256
    gcn_layers: int = 3
    S_O: int = 2048
    S_G: int = 1000
    S_M: int = 32
    N: int = 6
    heads: int = 4
    ff_width: int = 1024
    downsample_dim: int = 64
    ar_hidden: int = 256
    ar_layers: int = 3
    variant: str = "full"
    freeze_policy: str = "freeze"
    adjacency_norm: str = "row"
    zero_init_output: bool = False
    knn_k: int = 8
    morph_features: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.n % self.heads:
            raise ValueError(f"n={self.n} must be divisible by heads={self.heads}")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {self.freeze_policy!r}")

    @property
    def feature_set(self) -> str:
        return {"joints_only": "joints_only", "links_only": "links_only"}.get(self.variant, "final")

    @property
    def uses_morphology(self) -> bool:
        return self.variant != "point_cloud_only"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The small configuration used for gradient checks."""
    base = dict(n=16, gcn_hidden=16, S_O=32, S_G=16, S_M=8, N=2, heads=4, ff_width=32,
                downsample_dim=8, ar_hidden=16, freeze_policy="scratch", knn_k=4)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class KeypointSpec:
    gripper_point_index: list[int]
    link_name: list[str]

    def __post_init__(self):
        if len(self.gripper_point_index) != len(self.link_name):
            raise ValueError("keypoint indices and links differ in length")

    def __len__(self):
        return len(self.link_name)

    def to_list(self) -> list[dict]:
        return [{"gripper_point_index": int(i), "link": l} for i, l in zip(self.gripper_point_index, self.link_name)]

    @classmethod
    def from_list(cls, items) -> "KeypointSpec":
        return cls([int(d["gripper_point_index"]) for d in items], [d["link"] for d in items])


@dataclass
class ContactPrediction:
    indices: torch.Tensor  # (B, N) long
    step_logits: torch.Tensor  # (B, N, S_O)


@dataclass
class ModelOutput:
    contact_maps: torch.Tensor  # (B, S_O, N)
    prediction: ContactPrediction
    F_O: torch.Tensor
    F_G: torch.Tensor
    F_M: torch.Tensor | None
    F_O_hat: torch.Tensor
    F_M_hat: torch.Tensor  # refined morphology (or refined gripper for point_cloud_only)
    extras: dict = field(default_factory=dict)


class GCNEncoder(nn.Module):
    """GCN hidden layers (ReLU) followed by an output linear layer.

    Rows with zero degree (padding) are forced to zero so they never leak into
    downstream attention.
    """

    def __init__(self, d_in: int, hidden: int, layers: int, d_out: int, gen=None):
        super().__init__()
        dims = [d_in] + [hidden] * layers
        self.convs = nn.ModuleList(tnn.GCNLayer(a, b, gen=gen) for a, b in zip(dims[:-1], dims[1:]))
        self.out = tnn.Linear(hidden, d_out, gen=gen)

    def forward(self, x, adj_norm, node_mask=None):
        for conv in self.convs:
            x = conv(x, adj_norm)
        out = self.out(x)
        if node_mask is not None:
            out = out * node_mask.unsqueeze(-1).to(out.dtype)
        return out


def contact_maps(F_O_hat: torch.Tensor, F_G: torch.Tensor, keypoint_idx: torch.Tensor) -> torch.Tensor:
    """logits[b, v, i] = <F_O_hat[b, v], F_G[b, keypoint_idx[b, i]]>."""
    keypoint_idx = torch.as_tensor(keypoint_idx, dtype=torch.long)
    if keypoint_idx.numel() and (int(keypoint_idx.min()) < 0 or int(keypoint_idx.max()) >= F_G.shape[-2]):
        raise InvalidKeypointIndex(f"keypoint index outside [0, {F_G.shape[-2]})")
    gathered = _gather_rows(F_G, keypoint_idx)
    return F_O_hat @ gathered.transpose(-1, -2)


def _gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x: (B, S, d), idx: (B, K) -> (B, K, d)."""
    return x.gather(-2, idx.unsqueeze(-1).expand(*idx.shape, x.shape[-1]))


def gather_keypoints(F_G, F_M_hat, keypoint_idx, morph_rows):
    """Embeddings at the keypoint gripper points and at the keypoints' link nodes."""
    keypoint_idx = torch.as_tensor(keypoint_idx, dtype=torch.long)
    morph_rows = torch.as_tensor(morph_rows, dtype=torch.long)
    if keypoint_idx.numel() and (int(keypoint_idx.min()) < 0 or int(keypoint_idx.max()) >= F_G.shape[-2]):
        raise InvalidKeypointIndex(f"keypoint index outside [0, {F_G.shape[-2]})")
    if morph_rows.numel() and (int(morph_rows.min()) < 0 or int(morph_rows.max()) >= F_M_hat.shape[-2]):
        raise UnknownLink("keypoint link row outside the morphology graph")
    return _gather_rows(F_G, keypoint_idx), _gather_rows(F_M_hat, morph_rows)


def keypoint_rows(keypoints: KeypointSpec, link_index: dict[str, int]) -> list[int]:
    rows = []
    for name in keypoints.link_name:
        if name not in link_index:
            raise UnknownLink(f"keypoint link {name!r} is not in the morphology graph")
        rows.append(link_index[name])
    return rows


def geometric_embedding_loss(maps: torch.Tensor, gt_maps: torch.Tensor) -> torch.Tensor:
    return tnn.bce_with_logits(maps, gt_maps)


def predicted_contact_loss(step_logits: torch.Tensor, gt_indices: torch.Tensor) -> torch.Tensor:
    """Mean over steps (and batch) of the per-step vertex cross-entropy."""
    return tnn.cross_entropy(step_logits, gt_indices)


class ContactNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        gen = torch.Generator().manual_seed(c.seed)
        self.enc_object = GCNEncoder(3, c.gcn_hidden, c.gcn_layers, c.n, gen)
        self.enc_gripper = GCNEncoder(3, c.gcn_hidden, c.gcn_layers, c.n, gen)
        self.enc_morph = GCNEncoder(c.morph_features, c.gcn_hidden, c.gcn_layers, c.n, gen)
        self.t_object = tnn.TransformerModule(c.n, c.heads, c.ff_width, c.zero_init_output, gen)
        self.t_other = tnn.TransformerModule(c.n, c.heads, c.ff_width, c.zero_init_output, gen)
        self.down_object = tnn.Linear(c.n, c.downsample_dim, gen=gen)
        self.down_gripper = tnn.Linear(c.n, c.downsample_dim, gen=gen)
        blocks = 3 if c.uses_morphology else 2
        if c.uses_morphology:
            self.down_morph = tnn.Linear(c.n, c.downsample_dim, gen=gen)
        self.ar_in = blocks * c.downsample_dim + 3 * max(c.N - 1, 0)
        self.ar_steps = nn.ModuleList(
            tnn.MLP(self.ar_in, [c.ar_hidden] * c.ar_layers, 1, gen=gen) for _ in range(c.N - 1)
        )
        if not c.uses_morphology:
            # the morphology encoder is unused; keep it out of the optimiser
            for p in self.enc_morph.parameters():
                p.requires_grad_(False)

    def point_encoders(self):
        return [self.enc_object, self.enc_gripper]

    def apply_freeze_policy(self):
        if self.config.freeze_policy == "freeze":
            for enc in self.point_encoders():
                for p in enc.parameters():
                    p.requires_grad_(False)

    # ------------------------------------------------------------------
    def encode(self, batch):
        adj_o = tnn.normalize_adjacency(batch["obj_adj"], self.config.adjacency_norm)
        adj_g = tnn.normalize_adjacency(batch["grip_adj"], self.config.adjacency_norm)
        F_O = self.enc_object(batch["obj_points"], adj_o)
        F_G = self.enc_gripper(batch["grip_points"], adj_g)
        F_M = None
        if self.config.uses_morphology:
            adj_m = tnn.normalize_adjacency(batch["morph_adj"], self.config.adjacency_norm)
            F_M = self.enc_morph(batch["morph_feats"], adj_m, morph_mask(batch))
        return F_O, F_G, F_M

    def correspond(self, F_O, other, other_mask=None):
        """Residual cross-attention: each side is refined by attending to the other."""
        F_O_hat = F_O + self.t_object(F_O, other, cross_mask=other_mask)
        other_hat = other + self.t_other(other, F_O, source_mask=other_mask)
        if other_mask is not None:
            other_hat = other_hat * other_mask.unsqueeze(-1).to(other_hat.dtype)
        return F_O_hat, other_hat

    def autoregressive(self, F_O_hat, F_GN, F_MN, obj_points, maps, mode="teacher_forcing", gt_indices=None):
        c = self.config
        if mode not in ("teacher_forcing", "inference"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "teacher_forcing" and gt_indices is None:
            raise MissingGroundTruth("teacher forcing needs ground-truth contact indices")
        B, S, _ = F_O_hat.shape
        d_obj = self.down_object(F_O_hat)
        d_grip = self.down_gripper(F_GN)
        d_morph = self.down_morph(F_MN) if F_MN is not None else None

        logits0 = maps[..., 0]
        steps = [logits0]
        chosen = [logits0.argmax(dim=-1)]
        feed = torch.as_tensor(gt_indices, dtype=torch.long) if mode == "teacher_forcing" else None
        prev = torch.zeros(B, 3 * max(c.N - 1, 0), dtype=F_O_hat.dtype)
        for i in range(1, c.N):
            src = feed[:, i - 1] if feed is not None else chosen[i - 1]
            coord = obj_points[torch.arange(B), src]
            prev = prev.clone()
            prev[:, 3 * (i - 1) : 3 * i] = coord
            parts = [d_obj, d_grip[:, i : i + 1].expand(B, S, -1)]
            if d_morph is not None:
                parts.append(d_morph[:, i : i + 1].expand(B, S, -1))
            parts.append(prev.unsqueeze(1).expand(B, S, -1))
            logits = self.ar_steps[i - 1](torch.cat(parts, dim=-1)).squeeze(-1)
            steps.append(logits)
            chosen.append(logits.argmax(dim=-1))
        return ContactPrediction(torch.stack(chosen, dim=1), torch.stack(steps, dim=1))

    def forward(self, batch, mode="teacher_forcing") -> ModelOutput:
        c = self.config
        _check_batch(batch, c)
        F_O, F_G, F_M = self.encode(batch)
        kp_idx = torch.as_tensor(batch["keypoint_idx"], dtype=torch.long)
        if c.uses_morphology:
            mask = morph_mask(batch)
            F_O_hat, F_M_hat = self.correspond(F_O, F_M, mask)
            F_GN, F_MN = gather_keypoints(F_G, F_M_hat, kp_idx, batch["keypoint_rows"])
        else:
            F_O_hat, F_M_hat = self.correspond(F_O, F_G)
            # refined gripper embeddings take the gripper slot; no morphology slot
            _, F_GN = gather_keypoints(F_G, F_M_hat, kp_idx, kp_idx)
            F_MN = None
        maps = contact_maps(F_O_hat, F_G, kp_idx)
        pred = self.autoregressive(F_O_hat, F_GN, F_MN, batch["obj_points"], maps, mode, batch.get("gt_indices"))
        return ModelOutput(maps, pred, F_O, F_G, F_M, F_O_hat, F_M_hat)

    def losses(self, batch, weights=(1.0, 1.0)):
        out = self.forward(batch, "teacher_forcing")
        geo = geometric_embedding_loss(out.contact_maps, batch["gt_maps"])
        con = predicted_contact_loss(out.prediction.step_logits, batch["gt_indices"])
        total = weights[0] * geo + weights[1] * con
        return {"geometric": geo, "contact": con, "total": total}, out

    @torch.no_grad()
    def predict(self, batch) -> ContactPrediction:
        return self.forward(batch, "inference").prediction


def forward_variant(model: ContactNet, batch, weights=(1.0, 1.0)):
    """Losses for the model's configured variant (full, point-cloud-only or a morphology-feature subset)."""
    c = model.config
    if c.uses_morphology and ("morph_feats" not in batch or "keypoint_rows" not in batch):
        raise VariantInputMismatch(f"variant {c.variant!r} needs morphology inputs")
    feature_set = batch.get("feature_set")
    if c.uses_morphology and feature_set is not None and feature_set != c.feature_set:
        raise VariantInputMismatch(f"variant {c.variant!r} expects {c.feature_set!r} features, got {feature_set!r}")
    losses, _ = model.losses(batch, weights)
    return losses


def morph_mask(batch) -> torch.Tensor:
    return batch["morph_adj"].sum(dim=-1) > 0


def _check_batch(batch, c: ModelConfig):
    op = batch["obj_points"]
    if op.dim() != 3 or op.shape[-1] != 3:
        raise ShapeMismatch("obj_points must be (B, S_O, 3)")
    if batch["grip_points"].shape[-1] != 3:
        raise ShapeMismatch("grip_points must be (B, S_G, 3)")
    kp = torch.as_tensor(batch["keypoint_idx"])
    if kp.shape[-1] != c.N:
        raise ShapeMismatch(f"expected {c.N} keypoints, got {kp.shape[-1]}")
    if c.uses_morphology and batch["morph_feats"].shape[-1] != c.morph_features:
        raise ShapeMismatch(f"morphology features must have width {c.morph_features}")

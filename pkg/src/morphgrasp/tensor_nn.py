"""Dense float64 layers, losses, Adam and checkpoints on top of torch autograd.

Tensors follow the torch row convention: a set of S items with width d is an
``(..., S, d)`` tensor, so ``linear`` computes ``x @ W.T + b``.

Checkpoint layout (little-endian)::

    bytes 0..7    magic b"MGCKPT01"
    bytes 8..15   uint64 length L of the JSON header
    L bytes       UTF-8 JSON header: version, config, config_hash, step, entries
    then          float64 payload; each header entry gives name, group, shape
                  and element offset into the payload

Entry groups are ``param`` (model parameters), ``adam_m`` and ``adam_v``
(optimizer moments, keyed by parameter name).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import CorruptFile, GraphNotRecorded, HeadDivisibility, IndexOutOfRange, ShapeMismatch

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5
ADAM_LR = 5e-5
ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-8
CKPT_MAGIC = b"MGCKPT01"


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=DTYPE) if not torch.is_tensor(x) else x.to(DTYPE)


# ----------------------------------------------------------------------------
# functional ops


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    out = x @ weight.T
    return out if bias is None else out + bias


def normalize_adjacency(adj: torch.Tensor, mode: str = "row") -> torch.Tensor:
    """Row (D^-1 A) or symmetric (D^-1/2 A D^-1/2) normalisation; zero-degree rows stay zero."""
    deg = adj.sum(dim=-1)
    if mode == "row":
        inv = torch.where(deg > 0, 1.0 / torch.where(deg > 0, deg, torch.ones_like(deg)), torch.zeros_like(deg))
        return adj * inv.unsqueeze(-1)
    if mode == "symmetric":
        inv = torch.where(deg > 0, deg.clamp_min(1e-300).rsqrt(), torch.zeros_like(deg))
        return adj * inv.unsqueeze(-1) * inv.unsqueeze(-2)
    raise ValueError(f"unknown adjacency normalisation {mode!r}")


def gcn_layer(features: torch.Tensor, adj_norm: torch.Tensor, weight: torch.Tensor,
              activation: Callable | None = torch.relu) -> torch.Tensor:
    """``act(A_hat @ X @ W)`` with a pre-normalised adjacency."""
    if adj_norm.shape[-1] != features.shape[-2] or adj_norm.shape[-2] != features.shape[-2]:
        raise ShapeMismatch(f"adjacency {tuple(adj_norm.shape)} does not match {features.shape[-2]} nodes")
    if features.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"feature width {features.shape[-1]} != weight rows {weight.shape[0]}")
    out = (adj_norm @ features) @ weight
    return out if activation is None else activation(out)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def attention_weights(q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over the key axis; masked-out keys get weight 0."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(logits, dim=-1)


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    per = torch.log1p(torch.exp(-logits.abs())) + logits.clamp_min(0.0) - logits * targets
    return per.mean()


def cross_entropy(logits: torch.Tensor, target_index) -> torch.Tensor:
    """-log softmax(logits)[target] along the last axis, averaged over leading axes."""
    target = torch.as_tensor(target_index, dtype=torch.long)
    size = logits.shape[-1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= size):
        raise IndexOutOfRange(f"target index outside [0, {size})")
    if target.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"targets {tuple(target.shape)} vs logits {tuple(logits.shape)}")
    m = logits.max(dim=-1, keepdim=True).values.detach()
    lse = m.squeeze(-1) + torch.log(torch.exp(logits - m).sum(dim=-1))
    picked = logits.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return (lse - picked).mean()


# ----------------------------------------------------------------------------
# modules


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator | None) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None
        _uniform_(self.weight, d_in, gen)

    def zero_(self) -> "Linear":
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class GCNLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, activation=torch.relu, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out, dtype=DTYPE))
        self.activation = activation
        _uniform_(self.weight, d_in, gen)

    def forward(self, x, adj_norm):
        return gcn_layer(x, adj_norm, self.weight, self.activation)


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int, gen: torch.Generator | None = None):
        super().__init__()
        if width % heads:
            raise HeadDivisibility(f"width {width} not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.q = Linear(width, width, gen=gen)
        self.k = Linear(width, width, gen=gen)
        self.v = Linear(width, width, gen=gen)
        self.out = Linear(width, width, gen=gen)

    def _split(self, x):
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.width // self.heads).transpose(-2, -3)

    def forward(self, queries, keys_values, key_mask=None, return_weights=False):
        if queries.shape[-1] != self.width or keys_values.shape[-1] != self.width:
            raise ShapeMismatch(f"attention expects width {self.width}")
        q, k, v = self._split(self.q(queries)), self._split(self.k(keys_values)), self._split(self.v(keys_values))
        mask = None if key_mask is None else key_mask.unsqueeze(-2)  # broadcast over heads
        w = attention_weights(q, k, mask)
        mixed = (w @ v).transpose(-2, -3)
        out = self.out(mixed.reshape(*mixed.shape[:-2], self.width))
        return (out, w) if return_weights else out


def multi_head_attention(queries, keys_values, heads: int, projections: MultiHeadAttention, key_mask=None):
    if projections.heads != heads:
        raise HeadDivisibility(f"projections were built for {projections.heads} heads, not {heads}")
    return projections(queries, keys_values, key_mask)


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden: int, gen: torch.Generator | None = None):
        super().__init__()
        self.fc1 = Linear(width, hidden, gen=gen)
        self.fc2 = Linear(hidden, width, gen=gen)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class TransformerModule(nn.Module):
    """One pre-norm block: self-attention over the source, attention from the
    source into the cross sequence, feed-forward; each sub-layer residual.
    A final norm and an output projection produce the residual term that the
    caller adds back to the source embedding.
    """

    def __init__(self, width: int, heads: int = 4, ff_width: int = 1024, zero_init_output: bool = False,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.norm_self = LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, heads, gen=gen)
        self.norm_cross_q = LayerNorm(width)
        self.norm_cross_kv = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads, gen=gen)
        self.norm_ff = LayerNorm(width)
        self.ff = FeedForward(width, ff_width, gen=gen)
        self.norm_out = LayerNorm(width)
        self.out_proj = Linear(width, width, gen=gen)
        if zero_init_output:
            self.out_proj.zero_()

    def forward(self, source, cross, source_mask=None, cross_mask=None):
        if source.shape[-1] != cross.shape[-1]:
            raise ShapeMismatch("source and cross sequences need the same width")
        x = source
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, source_mask)
        x = x + self.cross_attn(self.norm_cross_q(x), self.norm_cross_kv(cross), cross_mask)
        x = x + self.ff(self.norm_ff(x))
        return self.out_proj(self.norm_out(x))


def transformer_module(source_seq, cross_seq, module: TransformerModule, source_mask=None, cross_mask=None):
    return module(source_seq, cross_seq, source_mask, cross_mask)


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: Sequence[int], d_out: int, gen: torch.Generator | None = None):
        super().__init__()
        dims = [d_in, *hidden]
        self.hidden = nn.ModuleList(Linear(a, b, gen=gen) for a, b in zip(dims[:-1], dims[1:]))
        self.head = Linear(dims[-1], d_out, gen=gen)

    def forward(self, x):
        for layer in self.hidden:
            x = torch.relu(layer(x))
        return self.head(x)


# ----------------------------------------------------------------------------
# gradients and optimisation


def backward(loss: torch.Tensor, module: nn.Module | None = None) -> dict[str, torch.Tensor]:
    """Populate ``.grad`` of every trainable parameter reachable from ``loss``."""
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise GraphNotRecorded("loss was not produced by a recorded forward pass")
    loss.backward()
    if module is None:
        return {}
    return {n: p.grad for n, p in module.named_parameters() if p.requires_grad and p.grad is not None}


def make_adam(params: Iterable[nn.Parameter], lr: float = ADAM_LR, betas=ADAM_BETAS, eps: float = ADAM_EPS):
    """Adam over trainable parameters only; frozen ones are never handed to the optimizer."""
    trainable = [p for p in params if p.requires_grad]
    return torch.optim.Adam(trainable, lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if p.grad is not None and p.grad.shape != p.shape:
                raise ShapeMismatch("gradient shape differs from parameter shape")
            if st and "exp_avg" in st and st["exp_avg"].shape != p.shape:
                raise ShapeMismatch("optimizer moment shape differs from parameter shape")
    optimizer.step()


GRAD_FLOOR = 1e-4


def _rel_err(a: torch.Tensor, n: torch.Tensor, floor: float) -> float:
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max().detach()) if a.numel() else 0.0


def grad_check(fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-5,
               floor: float = GRAD_FLOOR) -> float:
    """Max elementwise relative error between autograd and central differences.

    ``fn`` takes no arguments and closes over ``inputs`` (leaf float64 tensors
    with ``requires_grad``). Relative error is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps finite-difference roundoff on near-zero gradients from
    dominating, so gradients below it must agree to ``floor * tol`` absolutely.
    """
    inputs = list(inputs)
    out = fn()
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            g = torch.zeros_like(x) if g is None else g
            flat, gflat = x.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = gflat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


class _LossWrapper(nn.Module):
    def __init__(self, inner: nn.Module, loss_fn):
        super().__init__()
        self.inner = inner
        self.loss_fn = loss_fn

    def forward(self):
        return self.loss_fn(self.inner)


def grad_check_module(module: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor], h: float = 1e-5,
                      floor: float = GRAD_FLOOR, chunk: int = 512) -> dict[str, float]:
    """Per-parameter max relative error for every trainable parameter of ``module``.

    Same metric as :func:`grad_check`, but the perturbed losses are evaluated
    in vectorised chunks with ``torch.func.vmap``.
    """
    from torch.func import functional_call, vmap

    wrapper = _LossWrapper(module, loss_fn)
    module.zero_grad(set_to_none=True)
    loss = loss_fn(module)
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    base = {"inner." + n: p.detach() for n, p in module.named_parameters()}
    report = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        key = "inner." + name
        flat = p.detach().reshape(-1)

        def perturbed(delta, key=key, flat=flat, shape=p.shape):
            params = dict(base)
            params[key] = (flat + delta).reshape(shape)
            return functional_call(wrapper, params, ())

        numeric = torch.empty(flat.numel(), dtype=DTYPE)
        eye = torch.eye(flat.numel(), dtype=DTYPE) * h
        for s in range(0, flat.numel(), chunk):
            e = eye[s : s + chunk]
            numeric[s : s + chunk] = (vmap(perturbed)(e) - vmap(perturbed)(-e)) / (2 * h)
        report[name] = _rel_err(g.reshape(-1), numeric, floor)
    return report


# ----------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: str | os.PathLike, module: nn.Module, config: dict,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0

    def add(name, group, t):
        nonlocal offset
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size

    named = list(module.named_parameters())
    for name, p in named:
        add(name, "param", p)
    step = 0
    if optimizer is not None:
        by_id = {id(p): n for n, p in named}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                add(by_id[id(p)], "adam_m", st["exp_avg"])
                add(by_id[id(p)], "adam_v", st["exp_avg_sq"])
                step = int(st["step"])
    header = {
        "version": 1,
        "config": config,
        "config_hash": config_hash(config),
        "step": step,
        "trainable": [n for n, p in named if p.requires_grad],
        "entries": entries,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC or len(data) < 16:
        raise CorruptFile(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen])
    except ValueError as exc:
        raise CorruptFile(f"{path}: bad checkpoint header") from exc
    base = 16 + hlen
    tensors = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + 8 * e["offset"]
        if start + 8 * count > len(data):
            raise CorruptFile(f"{path}: truncated payload")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(e["shape"])
        tensors[(e["group"], e["name"])] = arr.astype(np.float64)
    if header.get("config_hash") != config_hash(header["config"]):
        raise CorruptFile(f"{path}: config hash mismatch")
    return header, tensors


def load_parameters(module: nn.Module, tensors: dict, prefixes: Sequence[str] | None = None) -> list[str]:
    """Copy checkpoint parameters into ``module`` (optionally only names under ``prefixes``)."""
    loaded = []
    with torch.no_grad():
        for name, p in module.named_parameters():
            if prefixes is not None and not any(name.startswith(pre) for pre in prefixes):
                continue
            arr = tensors.get(("param", name))
            if arr is None:
                continue
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
            loaded.append(name)
    return loaded


def load_optimizer_state(optimizer: torch.optim.Optimizer, module: nn.Module, header: dict, tensors: dict) -> None:
    by_id = {id(p): n for n, p in module.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = by_id[id(p)]
            if ("adam_m", name) in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(float(header["step"])),
                    "exp_avg": torch.from_numpy(tensors[("adam_m", name)].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[("adam_v", name)].copy()),
                }

"""Finite-difference audit of every layer type and the end-to-end tiny model."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np
import torch

from . import tensor_nn as tnn
from .model import ContactNet, KeypointSpec, tiny_config

THRESHOLD = 1e-4
COMPONENTS = ("linear", "gcn_layer", "layer_norm", "attention", "feed_forward", "transformer",
              "mlp", "bce_with_logits", "cross_entropy", "model")


class _SkewGrad(torch.autograd.Function):
    """Identity forward; backward scales the incoming gradient (used to prove the checker fires)."""

    generate_vmap_rule = True

    @staticmethod
    def forward(x, scale):
        return x.clone()

    @staticmethod
    def setup_context(ctx, inputs, output):
        ctx.scale = inputs[1]

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def _tap(x, corrupt: bool):
    return _SkewGrad.apply(x, 1.5) if corrupt else x


def _leaf(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=tnn.DTYPE) * scale).requires_grad_(True)


def _check(module, inputs, loss_of: Callable, h: float) -> float:
    """Max error over the explicit inputs and every trainable parameter."""
    worst = tnn.grad_check(lambda: loss_of(module), inputs, h) if inputs else 0.0
    if module is not None and any(p.requires_grad for p in module.parameters()):
        worst = max(worst, max(tnn.grad_check_module(module, loss_of, h).values()))
    return worst


def _away_from_kink(pre: torch.Tensor, margin: float = 0.01) -> bool:
    return bool(pre.detach().abs().min() > margin)


def _mlp_preactivations(mlp, x):
    out = []
    for layer in mlp.hidden:
        x = layer(x)
        out.append(x)
        x = torch.relu(x)
    return out


def check_component(name: str, corrupt: bool = False, h: float = 1e-5, seed: int = 0) -> float:
    gen = torch.Generator().manual_seed(seed)
    if name == "linear":
        layer = tnn.Linear(4, 5, gen=gen)
        x, w = _leaf(gen, 3, 4), torch.randn(3, 5, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [x], lambda m: (_tap(m(x), corrupt) * w).sum(), h)
    if name == "gcn_layer":
        adj = (torch.rand(6, 6, generator=gen, dtype=tnn.DTYPE) > 0.5).to(tnn.DTYPE)
        adj = tnn.normalize_adjacency(((adj + adj.T) > 0).to(tnn.DTYPE) + torch.eye(6, dtype=tnn.DTYPE))
        # resample until every pre-activation clears the ReLU kink
        while True:
            layer = tnn.GCNLayer(3, 4, gen=gen)
            x = _leaf(gen, 6, 3)
            if _away_from_kink(adj @ x @ layer.weight):
                break
        w = torch.randn(6, 4, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [x], lambda m: (_tap(m(x, adj), corrupt) * w).sum(), h)
    if name == "layer_norm":
        layer = tnn.LayerNorm(5)
        with torch.no_grad():
            layer.gain.copy_(torch.randn(5, generator=gen, dtype=tnn.DTYPE))
            layer.bias.copy_(torch.randn(5, generator=gen, dtype=tnn.DTYPE))
        x, w = _leaf(gen, 4, 5), torch.randn(4, 5, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [x], lambda m: (_tap(m(x), corrupt) * w).sum(), h)
    if name == "attention":
        layer = tnn.MultiHeadAttention(8, 2, gen=gen)
        q, kv = _leaf(gen, 1, 3, 8), _leaf(gen, 1, 5, 8)
        w = torch.randn(1, 3, 8, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [q, kv], lambda m: (_tap(m(q, kv), corrupt) * w).sum(), h)
    if name == "feed_forward":
        while True:
            layer = tnn.FeedForward(4, 6, gen=gen)
            x = _leaf(gen, 3, 4)
            if _away_from_kink(layer.fc1(x)):
                break
        w = torch.randn(3, 4, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [x], lambda m: (_tap(m(x), corrupt) * w).sum(), h)
    if name == "transformer":
        layer = tnn.TransformerModule(8, 2, 16, gen=gen)
        src, cross = _leaf(gen, 1, 4, 8), _leaf(gen, 1, 3, 8)
        w = torch.randn(1, 4, 8, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [src, cross], lambda m: (_tap(m(src, cross), corrupt) * w).sum(), h)
    if name == "mlp":
        while True:
            layer = tnn.MLP(4, [6, 6], 2, gen=gen)
            x = _leaf(gen, 3, 4)
            if all(_away_from_kink(p) for p in _mlp_preactivations(layer, x)):
                break
        w = torch.randn(3, 2, generator=gen, dtype=tnn.DTYPE)
        return _check(layer, [x], lambda m: (_tap(m(x), corrupt) * w).sum(), h)
    if name == "bce_with_logits":
        x = _leaf(gen, 4, 3, scale=3.0)
        y = (torch.rand(4, 3, generator=gen, dtype=tnn.DTYPE) > 0.5).to(tnn.DTYPE)
        return _check(None, [x], lambda m: tnn.bce_with_logits(_tap(x, corrupt), y), h)
    if name == "cross_entropy":
        x = _leaf(gen, 2, 3, 7, scale=3.0)
        target = torch.randint(0, 7, (2, 3), generator=gen)
        return _check(None, [x], lambda m: tnn.cross_entropy(_tap(x, corrupt), target), h)
    if name == "model":
        model, batch = tiny_model_and_batch(seed)
        return max(tnn.grad_check_module(
            model, lambda m: _tap(m.losses(batch)[0]["total"], corrupt), h).values())
    raise ValueError(f"unknown component {name!r}")


def tiny_model_and_batch(seed: int = 0, batch_size: int = 2):
    """Random tiny-config model and a synthetic batch with every input the forward pass needs.

    Inputs are unit scale so that pre-activations sit well clear of ReLU kinks at the
    finite-difference step.
    """
    from .training import collate, make_sample
    from .urdf_morph import MorphologyGraph

    cfg = tiny_config(seed=seed)
    model = ContactNet(cfg)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(batch_size):
        op = rng.normal(size=(cfg.S_O, 3))
        gp = rng.normal(size=(cfg.S_G, 3))
        oa = _ring_adjacency(cfg.S_O)
        ga = _ring_adjacency(cfg.S_G)
        real = cfg.S_M - 2
        feats = np.zeros((cfg.S_M, cfg.morph_features))
        feats[:real] = rng.normal(size=(real, cfg.morph_features))
        adj = np.zeros((cfg.S_M, cfg.S_M))
        adj[:real, :real] = _ring_adjacency(real)
        links = [f"l{i}" for i in range(real)]
        morph = MorphologyGraph(feats, adj, real, {n: i for i, n in enumerate(links)}, "final")
        kp_idx = rng.choice(cfg.S_G, size=cfg.N, replace=False)
        kp = KeypointSpec([int(i) for i in kp_idx], links[: cfg.N])
        sample = make_sample("g", "o", op, oa, gp, ga, morph, kp)
        sample.arrays["gt_indices"] = rng.choice(cfg.S_O, size=cfg.N, replace=False)
        gt_maps = np.zeros((cfg.S_O, cfg.N))
        gt_maps[sample.arrays["gt_indices"], np.arange(cfg.N)] = 1.0
        sample.arrays["gt_maps"] = gt_maps
        samples.append(sample)
    return model, collate(samples)


def _ring_adjacency(n: int) -> np.ndarray:
    adj = np.eye(n)
    i = np.arange(n)
    adj[i, (i + 1) % n] = adj[(i + 1) % n, i] = 1.0
    return adj


def run_gradcheck(size: str = "tiny", inject: str | None = None, components=COMPONENTS) -> dict[str, float]:
    if size != "tiny":
        raise ValueError("only the tiny size is supported")
    if inject is not None and inject not in components:
        raise ValueError(f"unknown component {inject!r}")
    return {name: check_component(name, corrupt=(name == inject)) for name in components}


def format_report(report: dict[str, float], threshold: float = THRESHOLD, elapsed: float | None = None) -> str:
    lines = [f"{'component':16s} {'max_rel_err':>12s}  status"]
    for name, err in report.items():
        lines.append(f"{name:16s} {err:12.3e}  {'ok' if err < threshold else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def timed_gradcheck(**kw) -> tuple[dict[str, float], float]:
    t = time.perf_counter()
    report = run_gradcheck(**kw)
    return report, time.perf_counter() - t

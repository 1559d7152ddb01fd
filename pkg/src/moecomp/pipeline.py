"""End-to-end compression: calibration, allocation, factor training, evaluation."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basis import TrainConfig, init_state, reconstruction_loss, scaled_loss, train_group
from .errors import ArgumentError, ShapeError
from .linalg import silu, svd
from .model_io import (KINDS, CompressedKind, CompressedLayer, CompressedModel, MoELayer,
                       MoEModel, parameter_report)
from .projection import build_projection
from .routing import RoutingTrace, build_group_plan, expert_frequencies, group_frequencies
from .spectral import (DEFAULT_RESIDUAL_FRACTION, DEFAULT_XI, RankAllocation, allocate_ranks,
                       effective_rank, importance_scores, rank_budget)

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "TOKEN_PRESETS",
    "sample_tokens",
    "moe_forward",
    "layer_forward",
    "run_calibration",
    "compress_model",
    "evaluate",
    "worker_count",
]

TOKEN_PRESETS = ("normal", "shifted", "heavy")


@dataclass
class PipelineConfig:
    ratio: float = 0.4
    xi: float = DEFAULT_XI
    k: int = 4
    residual_fraction: float = DEFAULT_RESIDUAL_FRACTION
    residual: bool = True
    allocation: str = "adaptive"
    seed: int = 0
    calibration_tokens: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if not 0.0 < self.ratio < 1.0:
            raise ArgumentError(f"ratio {self.ratio} outside (0, 1)")
        if not 0.0 <= self.xi <= 1.0:
            raise ArgumentError(f"xi {self.xi} outside [0, 1]")
        if self.allocation not in ("adaptive", "uniform"):
            raise ArgumentError(f"allocation must be 'adaptive' or 'uniform', got {self.allocation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def worker_count() -> int:
    """Worker cap from ``RFID_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("RFID_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"RFID_THREADS={raw!r} is not an integer")
    if n < 0:
        raise ArgumentError("RFID_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------------- #
# forward pass and calibration
# --------------------------------------------------------------------------- #

def sample_tokens(count: int, d: int, seed: int, preset: str = "normal") -> np.ndarray:
    """Seeded calibration/held-out token vectors, shape ``(count, d)``."""
    rng = np.random.default_rng(seed)
    if preset == "normal":
        return rng.standard_normal((count, d))
    if preset == "shifted":
        shift = 0.5 * rng.standard_normal(d)
        return rng.standard_normal((count, d)) + shift
    if preset == "heavy":
        # unit-variance Student-t with 3 degrees of freedom
        return rng.standard_t(3, size=(count, d)) / math.sqrt(3.0)
    raise ArgumentError(f"unknown token preset {preset!r}; choose from {TOKEN_PRESETS}")


def _route(layer: MoELayer, X: np.ndarray, renormalize: bool):
    logits = X @ layer.router.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    # stable sort on -probs: equal probabilities keep ascending expert order
    top = np.argsort(-probs, axis=1, kind="stable")[:, :layer.top_k]
    weights = np.take_along_axis(probs, top, axis=1)
    if renormalize:
        weights = weights / weights.sum(axis=1, keepdims=True)
    return top, weights


def layer_forward(layer: MoELayer, X, renormalize: bool = False) -> np.ndarray:
    """Batched MoE layer output for token rows ``X`` of shape ``(T, d)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != layer.d:
        raise ShapeError(f"tokens have width {X.shape[1]}, layer expects {layer.d}")
    top, weights = _route(layer, X, renormalize)
    Y = np.zeros_like(X)
    for e in range(layer.n):
        rows, slot = np.nonzero(top == e)
        if rows.size == 0:
            continue
        x = X[rows]
        h = (x @ layer.up[e].T) * silu(x @ layer.gate[e].T)
        Y[rows] += weights[rows, slot][:, None] * (h @ layer.down[e].T)
    return Y


def moe_forward(model: MoEModel, x, layer: int, renormalize: bool = False) -> np.ndarray:
    """Output of one MoE layer for a single token vector."""
    return layer_forward(model.layers[layer], np.asarray(x, dtype=np.float64)[None, :],
                         renormalize)[0]


def run_calibration(model: MoEModel, count: int, seed: int = 0, preset: str = "normal",
                    renormalize: bool = False) -> list[RoutingTrace]:
    """Route ``count`` seeded tokens through every layer and tally expert selections.

    Each layer sees the same token set; each (token, selected expert) pair adds
    one count, so every layer's counts sum to ``count * top_k``.
    """
    if count < 1:
        raise ArgumentError("calibration needs at least one token")
    X = sample_tokens(count, model.shape[2], seed, preset)
    traces = []
    for li, layer in enumerate(model.layers):
        top, _ = _route(layer, X, renormalize)
        counts = np.bincount(top.ravel(), minlength=layer.n)
        traces.append(RoutingTrace(layer=li, counts=tuple(int(c) for c in counts)))
    return traces


# --------------------------------------------------------------------------- #
# compression
# --------------------------------------------------------------------------- #

_KIND_ID = {kind: i for i, kind in enumerate(KINDS)}


def _projection_seed(base_seed: int, kind: str) -> int:
    return int(np.random.SeedSequence([base_seed, 0x5052, _KIND_ID[kind]]).generate_state(1)[0])


def _round_f32(a):
    return None if a is None else np.asarray(a, dtype=np.float32).astype(np.float64)


def _compress_item(layer_idx: int, kind: str, W: np.ndarray, trace: RoutingTrace,
                   config: PipelineConfig, projection, budget) -> CompressedKind:
    n, p, d = W.shape
    k = config.k
    label = f"layer{layer_idx}.{kind}"
    F = expert_frequencies(trace)
    plan = build_group_plan(F, k)
    F_g = group_frequencies(trace, plan)
    eff = np.array([effective_rank(svd(W[list(g)].reshape(-1, d), f"{label}.group{gi}").S)
                    for gi, g in enumerate(plan.groups)])
    scores = importance_scores(eff, F_g, config.xi)
    K_total, a = budget
    C = scores.C if config.allocation == "adaptive" else np.full(plan.m, 1.0 / plan.m)
    alloc: RankAllocation = allocate_ranks(C, K_total, [min(k * p, d)] * plan.m)

    state = init_state(W, plan, alloc.K, config.train.activation,
                       projection=projection if a > 0 else None, label=label + ".")
    zero_loss = float(np.sum(W * W))
    result = train_group(state, config.train, label=label)
    trained = result.state
    trained.A = [_round_f32(x) for x in trained.A]
    trained.bank.bases = [_round_f32(x) for x in trained.bank.bases]
    trained.alpha = _round_f32(trained.alpha)
    trained.eta = _round_f32(trained.eta)
    stored_loss = reconstruction_loss(trained)

    meta = {
        "frequencies": F.tolist(),
        "group_frequencies": F_g.tolist(),
        "importance": scores.to_dict(),
        "allocation_mode": config.allocation,
        "allocation": alloc.to_dict(),
        "budget": {"K_total": K_total, "a_per_group": a},
        "training": {
            "zero_factor_loss": zero_loss,
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            "stored_loss": stored_loss,
            "initial_scaled_loss": scaled_loss(result.initial_loss, W),
            "final_scaled_loss": scaled_loss(result.final_loss, W),
            "steps_run": len(result.history) - 1,
            "best_step": result.best_step,
            "stopped_early": result.stopped_early,
            "log": result.log,
        },
    }
    logger.info("%s: K=%s loss %.4e -> %.4e", label, list(alloc.K),
                result.initial_loss, result.final_loss)
    return CompressedKind(plan=plan, A=trained.A, bases=trained.bank.bases, alpha=trained.alpha,
                          eta=trained.eta, activation=trained.activation, meta=meta)


def compress_model(model: MoEModel, traces: Sequence[RoutingTrace], config: PipelineConfig,
                   workers: Optional[int] = None) -> CompressedModel:
    """Compress the up and gate matrices of every layer.

    All budget checks run before any training, so an infeasible ratio fails
    fast.  (layer, kind) problems are independent and may run on a thread
    pool; results are assembled in layer order, so the worker count never
    changes the output.
    """
    n, p, d = model.shape
    by_layer = {t.layer: t for t in traces}
    for li, layer in enumerate(model.layers):
        if li not in by_layer:
            raise ShapeError(f"trace has no entry for layer {li}")
        if by_layer[li].n_experts != layer.n:
            raise ShapeError(f"layer {li}: trace has {by_layer[li].n_experts} experts, "
                             f"model has {layer.n}")
        if (layer.n, layer.p, layer.d) != (n, p, d):
            raise ShapeError("all layers must share (n, p, d)")

    rf = config.residual_fraction if config.residual else 0.0
    budget = rank_budget(n, config.k, p, d, config.ratio, rf)
    a = budget[1]
    projections = {}
    if a > 0:
        for kind in KINDS:
            projections[kind] = build_projection(config.k * p * d, a,
                                                 _projection_seed(config.seed, kind))

    items = [(li, kind) for li in range(len(model.layers)) for kind in KINDS]

    def run(item):
        li, kind = item
        return _compress_item(li, kind, model.layers[li].kind(kind), by_layer[li], config,
                              projections.get(kind), budget)

    workers = worker_count() if workers is None else max(1, workers)
    if workers == 1:
        results = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            results = list(pool.map(run, items))
    done = dict(zip(items, results))

    layers = [CompressedLayer(top_k=layer.top_k, router=layer.router, down=layer.down,
                              kinds={kind: done[(li, kind)] for kind in KINDS})
              for li, layer in enumerate(model.layers)]
    cm = CompressedModel(n=n, p=p, d=d, layers=layers, projections=projections,
                         config=config.to_dict())
    cm.report = parameter_report(model, cm)
    return cm


# --------------------------------------------------------------------------- #
# evaluation
# --------------------------------------------------------------------------- #

def evaluate(model: MoEModel, compressed: CompressedModel, tokens: np.ndarray,
             renormalize: bool = False) -> dict:
    """Reconstruction and forward-pass error of a compressed model.

    Per group: relative Frobenius error, raw squared loss, and scaled loss
    (per-element RMS error over the standard deviation of the group's
    weights).  Model level: calibration-frequency-weighted mean of per-expert
    relative errors, and the mean relative output error of each layer on the
    held-out ``tokens`` (every layer is fed the same tokens), averaged over
    layers.
    """
    n, p, d = model.shape
    if (n, p, d) != (compressed.n, compressed.p, compressed.d) or \
            len(model.layers) != len(compressed.layers):
        raise ShapeError("evaluate: architectures differ")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    layer_docs = []
    weighted, forward = [], []
    for li, (orig, cl) in enumerate(zip(model.layers, compressed.layers)):
        recon = {}
        kinds_doc = {}
        for kind in KINDS:
            W = orig.kind(kind)
            W_hat = compressed.reconstruct(li, kind)
            recon[kind] = W_hat
            ck = cl.kinds[kind]
            groups = []
            for gi, members in enumerate(ck.plan.groups):
                Wg, Hg = W[list(members)], W_hat[list(members)]
                loss = float(np.sum((Wg - Hg) ** 2))
                groups.append({"group": gi, "experts": list(members), "rank": ck.ranks[gi],
                               "rel_error": math.sqrt(loss / float(np.sum(Wg * Wg))),
                               "loss": loss, "scaled_loss": scaled_loss(loss, Wg)})
            expert_err = np.sqrt(np.sum((W - W_hat) ** 2, axis=(1, 2)) /
                                 np.sum(W * W, axis=(1, 2)))
            F = np.asarray(ck.meta.get("frequencies", np.full(n, 1.0 / n)))
            fw = float(np.sum(F * expert_err))
            weighted.append(fw)
            kinds_doc[kind] = {"groups": groups, "weighted_rel_error": fw,
                               "mean_rel_error": float(expert_err.mean())}
        comp_layer = MoELayer(up=recon["up"], gate=recon["gate"], down=cl.down,
                              router=cl.router, top_k=cl.top_k)
        y0 = layer_forward(orig, tokens, renormalize)
        y1 = layer_forward(comp_layer, tokens, renormalize)
        rel = np.linalg.norm(y0 - y1, axis=1) / np.maximum(np.linalg.norm(y0, axis=1), 1e-30)
        fe = float(rel.mean())
        forward.append(fe)
        layer_docs.append({"layer": li, "kinds": kinds_doc, "forward_rel_error": fe})
    return {
        "layers": layer_docs,
        "weighted_rel_error": float(np.mean(weighted)),
        "forward_rel_error": float(np.mean(forward)),
        "tokens": int(tokens.shape[0]),
        "achieved_ratio": compressed.report.get("ratio"),
    }

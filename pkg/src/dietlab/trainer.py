"""Cloud-side training: BCE next-item loss, Adam, triangular learning rate.

Modes (what is optimised):

=========  ==============================================================
base       every backbone parameter, dense (the ``Base`` recommender)
random     every backbone parameter behind a fixed random mask
mask       one global score map per layer, shared by all users (``+mask``)
MG         per-user hypernetwork masks without row correction (``+MG``)
DIET       per-user hypernetwork masks with row correction
DIETING    as DIET, all layers read prefixes of one trainable buffer
=========  ==============================================================

In ``mask``/``MG``/``DIET`` the backbone is never written. With
``train_embeddings`` the masked modes also learn the item-embedding table,
which is not part of the masked network and ships with the candidates; it is
trained on a copy so the passed backbone still stays bitwise intact.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import BackboneParams, Diet, constant_params, dense_weights, keep_count, score_all, hidden
from .data import Samples
from .dietgen import (
    STE_RULES, GeneratorStack, SharedBuffer, binarize_topk, build_stack, dieting_bind, embed_windows,
    generate_masks, masked_layer_weights, shared_weights,
)

log = logging.getLogger(__name__)

MODES = ("base", "random", "mask", "MG", "DIET", "DIETING")
ALIASES = {"+mask": "mask", "mask-only": "mask", "+MG": "MG", "random-prune": "random", "Base": "base"}
STACK_KIND = {"mask": "mask", "MG": "MG", "DIET": "DIET", "DIETING": "DIET"}


def canonical_mode(mode: str) -> str:
    mode = ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class TrainConfig:
    mode: str = "DIET"
    keep_ratio: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    lr_base: float = 0.001
    cycle_length: int | None = None  # steps; None = one cycle over the whole run
    seed: int = 0
    negatives_per_positive: int = 1
    ste: str = "magnitude"  # or "identity"; see dietgen.masked_weight
    # masked modes only: also learn the candidate item-embedding table (on a copy)
    train_embeddings: bool = False

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        keep_count(1, self.keep_ratio)
        if self.lr_base <= 0:
            raise ValueError("lr_base must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.ste not in STE_RULES:
            raise ValueError(f"ste must be one of {STE_RULES}")
        if self.negatives_per_positive < 0:
            raise ValueError("negatives_per_positive must be >= 0")


# --- loss, schedule, optimizer -----------------------------------------------

def compute_loss(score_target, score_negatives) -> float:
    """``-log s(t) - sum log(1 - s(n))`` for one positive and its negatives."""
    return float(bce_loss(nx.Tensor(np.atleast_1d(score_target)),
                          nx.Tensor(np.atleast_2d(score_negatives))).data)


def bce_loss(pos, neg):
    """Mean over the batch of the per-example BCE; ``pos`` (B,), ``neg`` (B, n_neg)."""
    per = -nx.log_sigmoid(pos)
    if neg.shape[-1]:
        per = per - nx.reduce_sum(nx.log_sigmoid(-neg), axis=-1)
    return nx.mean(per)


def triangular_lr(step: int, lr_base: float, cycle_length: int) -> float:
    if cycle_length < 2:
        raise ValueError("cycle_length must be >= 2")
    half = cycle_length / 2.0
    pos = step % cycle_length
    return lr_base * (1.0 - abs(pos / half - 1.0))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise nx.NumericError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise nx.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        step = m / denom
        step *= lr / c1
        params[k] -= step


# --- models ------------------------------------------------------------------

@dataclass
class Model:
    """A trained recommender: backbone plus whatever chooses its masks."""

    mode: str
    backbone: BackboneParams
    stack: GeneratorStack | None = None
    fixed_diet: Diet | None = None
    buffer: SharedBuffer | None = None

    @property
    def serving_backbone(self) -> BackboneParams:
        if self.buffer is not None:
            return dieting_bind(self.buffer, self.backbone)
        return self.backbone

    def masks(self, contexts: np.ndarray) -> dict[str, np.ndarray] | None:
        if self.stack is not None:
            return generate_masks(self.stack, self.serving_backbone, contexts)
        if self.fixed_diet is not None:
            B = len(contexts)
            return {k: np.broadcast_to(m, (B,) + m.shape) for k, m in self.fixed_diet.masks.items()}
        return None

    def score(self, contexts: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Full-catalogue scores ``(B, n_items)`` for left-padded windows."""
        bb = self.serving_backbone
        out = []
        for lo in range(0, len(contexts), batch_size):
            ctx = contexts[lo:lo + batch_size]
            P = constant_params(bb)
            masks = self.masks(ctx)
            if masks is None:
                W = dense_weights(P, bb)
            else:
                W = {i.name: nx.Tensor(bb.weight(i.name) * masks[i.name]) for i in bb.layers}
            out.append(score_all(bb, P, W, ctx).data)
        return np.concatenate(out) if out else np.zeros((0, bb.n_items))


# --- fit ---------------------------------------------------------------------

@dataclass
class FitResult:
    model: Model
    log_rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "lr", "loss"])
        for e, s, lr, loss in self.log_rows:
            w.writerow([e, s, repr(lr), repr(loss)])
        return buf.getvalue()


def random_diet(bb: BackboneParams, keep_ratio: float, rng: nx.Rng) -> Diet:
    return Diet({i.name: binarize_topk(rng.normal(i.shape), keep_ratio) for i in bb.layers}, keep_ratio)


def _sample_negatives(rng: nx.Rng, targets: np.ndarray, n_items: int, k: int) -> np.ndarray:
    negs = rng.integers(0, n_items - 1, size=(len(targets), k)) if n_items > 1 else np.zeros((len(targets), k), int)
    # shift draws at or above the target so the target is never its own negative
    return negs + (negs >= targets[:, None])


def fit(config: TrainConfig, data: Samples, backbone: BackboneParams,
        stack: GeneratorStack | None = None,
        on_epoch: Callable[[int, Model], dict] | None = None) -> FitResult:
    """Train according to ``config.mode``; the passed backbone is never mutated.

    ``on_epoch(epoch, model)`` may return metrics recorded per epoch.
    """
    if len(data) == 0:
        raise ValueError("empty training split")
    if data.contexts.shape[1] != backbone.hyper.max_len:
        raise ValueError("sample window does not match backbone max_len")
    if config.negatives_per_positive > 0 and backbone.n_items < 2:
        raise ValueError("need at least two items to sample negatives")
    mode = config.mode
    root = nx.Rng(config.seed)
    t0 = time.perf_counter()

    fixed = None
    buffer = None
    bb = backbone
    if mode in ("base", "random"):
        bb = backbone.copy()
        params = bb.params
        if mode == "random":
            fixed = random_diet(bb, config.keep_ratio, root.child(1))
    else:
        if stack is None:
            stack = build_stack(backbone, STACK_KIND[mode], config.keep_ratio, root.child(2))
        else:
            stack = stack.copy()
        params = stack.params
        if mode == "DIETING":
            buffer = SharedBuffer.for_backbone(backbone, root.child(3))
            params = {**stack.params, "__w_max": buffer.w_max}
        if config.train_embeddings:
            bb = backbone.copy()
            params = {**params, "__item_emb": bb.params["item_emb"]}

    frozen = constant_params(bb)
    model = Model(mode, bb, stack if mode not in ("base", "random") else None, fixed, buffer)
    state = OptimState.for_params(params)
    n = len(data)
    steps_per_epoch = -(-n // config.batch_size)
    cycle = config.cycle_length or max(2, steps_per_epoch * max(config.epochs, 1))
    order_rng = root.child(4)
    neg_rng = root.child(5)
    result = FitResult(model)
    step = 0

    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            ctx = data.contexts[idx]
            tgt = data.targets[idx]
            negs = _sample_negatives(neg_rng, tgt, bb.n_items, config.negatives_per_positive)
            leaves = {k: nx.Tensor(v, requires_grad=True) for k, v in params.items()}
            if mode in ("base", "random"):
                P = leaves
                W = dense_weights(P, bb)
                if fixed is not None:
                    W = {k: w * fixed.masks[k] for k, w in W.items()}
            else:
                P = frozen
                if config.train_embeddings:
                    P = {**frozen, "item_emb": leaves["__item_emb"]}
                weights = dense_weights(P, bb)
                if buffer is not None:
                    weights = shared_weights(leaves["__w_max"], bb.layers)
                emb, valid = embed_windows(bb, ctx, P["item_emb"])
                W = masked_layer_weights(stack, leaves, weights, emb, valid, config.ste)
            h = hidden(bb, P, W, ctx)
            pos = nx.reduce_sum(h * nx.gather(P["item_emb"], tgt), axis=-1)
            neg = nx.reduce_sum(nx.reshape(h, (len(idx), 1, bb.hyper.d)) * nx.gather(P["item_emb"], negs), axis=-1)
            loss = bce_loss(pos, neg)
            nx.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
            lr = triangular_lr(step, config.lr_base, cycle)
            adam_step(params, grads, state, lr)
            step += 1
            value = float(loss.data)
            result.log_rows.append((epoch, step, lr, value))
            total += value * len(idx)
            count += len(idx)
        result.epoch_loss.append(total / count)
        if on_epoch is not None:
            result.epoch_metrics.append(on_epoch(epoch, model))
        log.info("epoch %d mode=%s loss=%.5f", epoch, mode, total / count)
    result.seconds = time.perf_counter() - t0
    return result

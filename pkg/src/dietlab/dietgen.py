"""Cloud-side diet generation.

For every maskable layer the generator stack holds

* a GRU extractor turning the embedded recent window into a vector ``g``,
* an element hypernetwork ``G``: affine ``d -> d_out*d_in`` producing a
  score per weight,
* a row hypernetwork ``G_row``: affine ``d -> d_out`` whose softmax rescales
  every score in a row (``corrected[a, b] = score[a, b] * row[a]``).

The mask keeps the ``keep_count`` entries with the largest ``|corrected|``
(ties go to the lowest flat index).  In the backward pass the binarizer is
the identity, so the gradient reaching the corrected scores is
``upstream * frozen_weight`` at kept and dropped positions alike.

GRU cell used by the extractors (``*`` is elementwise)::

    z  = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
    r  = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
    n  = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
    h' = (1 - z) * n + z * h

starting from ``h = 0``; left-padding positions leave ``h`` unchanged.

Stack kinds: ``mask`` (one learned score map per layer shared by all users),
``MG`` (hypernetwork scores, no row correction) and ``DIET`` (full).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import BackboneParams, Diet, LayerInfo, keep_count
from .data import window

KINDS = ("mask", "MG", "DIET")


# --- single-layer operations -------------------------------------------------

def gru_step(x, h, Wx, Wh, bx, bh):
    """One GRU cell update on tensors.

    ``x`` is ``(B, d)``; ``h`` is ``(B, d)``, or ``(n, B, d)`` when ``Wx``/``Wh``
    stack ``n`` independent cells as ``(n, d, 3d)``.
    """
    d = h.shape[-1]
    gx = nx.matmul(x, Wx) + bx
    gh = nx.matmul(h, Wh) + bh
    z = nx.sigmoid(gx[..., :d] + gh[..., :d])
    r = nx.sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
    n = nx.tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
    return (1.0 - z) * n + z * h


def extract_batch(emb, valid: np.ndarray, Wx, Wh, bx, bh):
    """Final GRU state for a batch of left-padded windows ``emb`` ``(B, L, d)``."""
    B, L = valid.shape
    d = Wh.shape[-2]
    h = nx.Tensor(np.zeros(Wh.shape[:-2] + (B, d)))
    for t in range(L):
        step = gru_step(emb[:, t, :], h, Wx, Wh, bx, bh)
        m = valid[:, t:t + 1].astype(float)
        h = step if m.all() else h + (step - h) * m
    return h


def extract_features(gru: dict, seq_embeddings) -> np.ndarray:
    """``g`` for one sequence of embeddings ``(l, d)``; ``gru`` holds Wx, Wh, bx, bh."""
    e = np.asarray(seq_embeddings, dtype=float)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("need a non-empty (l, d) sequence")
    out = extract_batch(nx.Tensor(e[None]), np.ones((1, e.shape[0]), dtype=bool),
                        *(nx.Tensor(gru[k]) for k in ("Wx", "Wh", "bx", "bh")))
    return out.data[0]


def element_scores(G: dict, g, shape: tuple[int, int]) -> np.ndarray:
    """Hypernetwork scores reshaped row-major to the layer ``shape``."""
    g = np.asarray(g, dtype=float)
    if g.shape != (G["weight"].shape[0],):
        raise nx.ShapeError(f"g has shape {g.shape}; hypernetwork expects ({G['weight'].shape[0]},)")
    if G["weight"].shape[1] != shape[0] * shape[1]:
        raise nx.ShapeError("hypernetwork output size does not match layer shape")
    return (g @ G["weight"] + G["bias"]).reshape(shape)


def row_importance(G_row: dict, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (G_row["weight"].shape[0],):
        raise nx.ShapeError(f"g has shape {g.shape}; row hypernetwork expects ({G_row['weight'].shape[0]},)")
    return nx.softmax(nx.Tensor(g @ G_row["weight"] + G_row["bias"])).data


def correct_scores(scores, rows) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    rows = np.asarray(rows, dtype=float)
    if rows.shape != scores.shape[-2:-1]:
        raise nx.ShapeError(f"row importance of length {rows.shape} for scores {scores.shape}")
    return scores * rows[:, None]


def binarize_topk(scores, keep_ratio: float, batch_dims: int = 0) -> np.ndarray:
    """Boolean mask of the ``keep_count`` largest ``|scores|`` per layer.

    The first ``batch_dims`` axes index independent layers (e.g. one per
    user); the remaining axes form the layer, flattened row-major.
    """
    s = np.asarray(scores, dtype=float)
    lead = s.shape[:batch_dims]
    n = int(np.prod(s.shape[batch_dims:])) if s.ndim > batch_dims else 0
    if n == 0:
        raise ValueError("empty layer")
    k = keep_count(n, keep_ratio)
    a = np.abs(s.reshape(-1, n))
    if k == n:
        return np.ones(s.shape, dtype=bool)
    kth = np.partition(a, n - k, axis=1)[:, n - k:n - k + 1]
    above = a > kth
    tied = a == kth
    need = k - above.sum(axis=1, keepdims=True)
    surplus = tied.sum(axis=1, keepdims=True) > need
    mask = above | tied
    if surplus.any():
        rows = surplus[:, 0]
        t = tied[rows]
        mask[rows] = above[rows] | (t & (np.cumsum(t, axis=1) <= need[rows]))
    return mask.reshape(lead + s.shape[batch_dims:])


def ste_backward(upstream, frozen_w) -> np.ndarray:
    """Gradient on the corrected scores given the gradient on ``w * mask``."""
    upstream = np.asarray(upstream, dtype=float)
    frozen_w = np.asarray(frozen_w, dtype=float)
    if upstream.shape[-2:] != frozen_w.shape[-2:]:
        raise nx.ShapeError(f"upstream {upstream.shape} vs weight {frozen_w.shape}")
    return upstream * frozen_w


STE_RULES = ("magnitude", "identity")


def _through_abs(g, x, _y):
    # g * sign(x), with sign(0) = +1
    out = np.array(g, dtype=float)
    np.negative(out, out=out, where=x < 0.0)
    return out


def masked_weight(w, scores, keep_ratio: float, batch_dims: int = 0, ste: str = "magnitude"):
    """``w * F(scores)`` as a graph node: top-k forward, straight-through backward.

    ``identity`` passes ``upstream * w`` to the signed scores unchanged.
    ``magnitude`` passes it to ``|scores|``, the quantity the binarizer ranks,
    so the signed scores receive ``upstream * w * sign(scores)``.  Only the
    latter makes "raise this score" mean "keep this weight" for negative
    scores.
    """
    if ste not in STE_RULES:
        raise ValueError(f"ste must be one of {STE_RULES}")
    top = lambda s: binarize_topk(s, keep_ratio, batch_dims)  # noqa: E731
    if ste == "identity":
        mask = nx.straight_through(scores, top)
    else:
        mask = nx.custom_grad(scores, top, _through_abs)
    return nx.mul(w, mask)


# --- generator stack ---------------------------------------------------------

@dataclass
class GeneratorStack:
    kind: str
    keep_ratio: float
    d: int
    layers: list[LayerInfo]
    params: dict[str, np.ndarray]

    def layer_params(self, name: str, part: str) -> dict[str, np.ndarray]:
        pre = f"{name}.{part}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def copy(self) -> "GeneratorStack":
        return GeneratorStack(self.kind, self.keep_ratio, self.d, list(self.layers),
                              {k: v.copy() for k, v in self.params.items()})


def build_stack(bb: BackboneParams, kind: str = "DIET", keep_ratio: float = 0.1,
                rng: nx.Rng | None = None) -> GeneratorStack:
    if kind not in KINDS:
        raise ValueError(f"unknown stack kind {kind!r}")
    keep_count(1, keep_ratio)
    rng = rng or nx.Rng(0)
    d = bb.hyper.d
    params: dict[str, np.ndarray] = {}
    for info in bb.layers:
        pre = info.name
        if kind == "mask":
            params[f"{pre}.S.scores"] = nx.init_xavier_normal(info.shape, rng)
            continue
        params[f"{pre}.gru.Wx"] = np.concatenate([nx.init_xavier_normal((d, d), rng) for _ in range(3)], axis=1)
        params[f"{pre}.gru.Wh"] = np.concatenate([nx.init_xavier_normal((d, d), rng) for _ in range(3)], axis=1)
        params[f"{pre}.gru.bx"] = np.zeros(3 * d)
        params[f"{pre}.gru.bh"] = np.zeros(3 * d)
        params[f"{pre}.G.weight"] = nx.init_xavier_normal((d, info.size), rng)
        params[f"{pre}.G.bias"] = np.zeros(info.size)
        if kind == "DIET":
            params[f"{pre}.Grow.weight"] = nx.init_xavier_normal((d, info.shape[0]), rng)
            params[f"{pre}.Grow.bias"] = np.zeros(info.shape[0])
    return GeneratorStack(kind, keep_ratio, d, list(bb.layers), params)


def check_compatible(stack: GeneratorStack, bb: BackboneParams) -> None:
    if [(i.name, i.shape) for i in stack.layers] != [(i.name, i.shape) for i in bb.layers]:
        raise ValueError("generator stack does not match backbone registry")


def extract_all(stack: GeneratorStack, T: dict, emb, valid: np.ndarray):
    """``g`` for every layer, ``(n_layers, B, d)``.

    Each layer keeps its own GRU; the weights are only stacked so the
    recurrences run as one batched computation.
    """
    d = stack.d

    def stacked(part, shape):
        return nx.concat([nx.reshape(T[f"{i.name}.gru.{part}"], (1,) + shape) for i in stack.layers], axis=0)

    return extract_batch(emb, valid, stacked("Wx", (d, 3 * d)), stacked("Wh", (d, 3 * d)),
                         stacked("bx", (1, 3 * d)), stacked("bh", (1, 3 * d)))


def layer_scores(stack: GeneratorStack, T: dict, g, info: LayerInfo, with_rows: bool = False):
    """Corrected scores for one layer as a graph node ``(B, d_out, d_in)``.

    ``g`` is that layer's extractor output ``(B, d)`` (ignored by ``mask``
    stacks).  With ``with_rows`` also returns the uncorrected scores and the
    row importance.
    """
    pre = info.name
    if stack.kind == "mask":
        s = T[f"{pre}.S.scores"]
        return (s, s, None) if with_rows else s
    B = g.shape[0]
    raw = nx.reshape(nx.matmul(g, T[f"{pre}.G.weight"]) + T[f"{pre}.G.bias"], (B,) + info.shape)
    if stack.kind == "MG":
        return (raw, raw, None) if with_rows else raw
    rows = nx.softmax(nx.matmul(g, T[f"{pre}.Grow.weight"]) + T[f"{pre}.Grow.bias"])
    out = raw * nx.reshape(rows, (B, info.shape[0], 1))
    return (out, raw, rows) if with_rows else out


def _features(stack, T, emb, valid):
    if stack.kind == "mask":
        return [None] * len(stack.layers)
    g = extract_all(stack, T, emb, valid)
    return [g[j] for j in range(len(stack.layers))]


def masked_layer_weights(stack: GeneratorStack, T: dict, weights: dict, emb, valid: np.ndarray,
                         ste: str = "magnitude") -> dict:
    """Effective weight per layer: shared for ``mask`` stacks, ``(B, d_out, d_in)`` otherwise."""
    batch = 0 if stack.kind == "mask" else 1
    feats = _features(stack, T, emb, valid)
    return {
        info.name: masked_weight(weights[info.name], layer_scores(stack, T, g, info), stack.keep_ratio, batch, ste)
        for info, g in zip(stack.layers, feats)
    }


def embed_windows(bb: BackboneParams, contexts: np.ndarray, item_emb=None):
    ctx = np.asarray(contexts, dtype=np.int64)
    table = item_emb if item_emb is not None else nx.Tensor(bb.params["item_emb"])
    return nx.gather(table, ctx), ctx >= 0


def generate_masks(stack: GeneratorStack, bb: BackboneParams, contexts: np.ndarray,
                   corrected: bool = True) -> dict[str, np.ndarray]:
    """Boolean masks ``(B, d_out, d_in)`` per layer for a batch of windows.

    ``corrected=False`` ranks the uncorrected hypernetwork scores instead
    (used to measure what the row correction changes).
    """
    check_compatible(stack, bb)
    T = {k: nx.Tensor(v) for k, v in stack.params.items()}
    emb, valid = embed_windows(bb, contexts)
    B = len(valid)
    out = {}
    for info, g in zip(stack.layers, _features(stack, T, emb, valid)):
        s, raw, _ = layer_scores(stack, T, g, info, with_rows=True)
        chosen = (s if corrected else raw).data
        if stack.kind == "mask":
            out[info.name] = np.broadcast_to(binarize_topk(chosen, stack.keep_ratio), (B,) + info.shape)
        else:
            out[info.name] = binarize_topk(chosen, stack.keep_ratio, batch_dims=1)
    return out


def generate_diet(stack: GeneratorStack, seq, bb: BackboneParams) -> Diet:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    masks = generate_masks(stack, bb, window(seq, bb.hyper.max_len)[None, :])
    return Diet({k: np.array(m[0]) for k, m in masks.items()}, stack.keep_ratio)


# --- DIETING -----------------------------------------------------------------

@dataclass
class SharedBuffer:
    """One flat weight vector whose prefixes back every maskable layer."""

    w_max: np.ndarray

    @classmethod
    def for_backbone(cls, bb: BackboneParams, rng: nx.Rng | None = None) -> "SharedBuffer":
        largest = max(bb.layers, key=lambda i: i.size)
        return cls(nx.init_xavier_normal(largest.kernel, rng or nx.Rng(0)).reshape(-1).copy())


def dieting_bind(buffer: SharedBuffer, bb: BackboneParams) -> BackboneParams:
    """Copy of ``bb`` whose layer weights are views of ``buffer.w_max`` prefixes."""
    need = max(i.size for i in bb.layers)
    if buffer.w_max.ndim != 1 or buffer.w_max.size < need:
        raise ValueError(f"shared buffer holds {buffer.w_max.size} values; largest layer needs {need}")
    out = bb.copy()
    for info in bb.layers:
        view = buffer.w_max[: info.size].reshape(info.shape)
        assert np.shares_memory(view, buffer.w_max)
        out.params[f"{info.name}.weight"] = view
    return out


def shared_weights(w_max, layers: list[LayerInfo]) -> dict:
    """Graph-side version of :func:`dieting_bind`: every layer reads a prefix of ``w_max``."""
    return {i.name: nx.reshape(w_max[: i.size], i.shape) for i in layers}

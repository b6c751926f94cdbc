"""Frozen sequential recommenders whose linear/conv weights can be masked.

Two architectures share one parameter layout:

* ``SASRec``: item + positional embeddings, ``blocks`` pre-LN transformer
  blocks (causal multi-head self-attention with q/k/v/o projections, then a
  two-layer ReLU feed-forward of width ``d``), a final layer norm; the hidden
  state at the last window position is scored against every item embedding.
* ``Caser``: the ``max_len x d`` embedding image goes through horizontal
  filters (``horiz_filters`` filters for each height ``1..min(4, max_len)``,
  tanh, max-pool over time) and ``vert_filters`` vertical ``max_len x 1``
  filters; both are concatenated into one fully connected tanh layer of
  width ``d`` that is scored against the item embeddings.

Maskable layers are stored as ``(d_out, d_in)`` matrices; a conv filter is
one row (a horizontal filter of height h flattens to ``h*d`` values, a
vertical filter to ``max_len`` values).  Registry order, which the wire and
checkpoint formats depend on:

* SASRec: ``block{k}.attn.q``, ``.attn.k``, ``.attn.v``, ``.attn.o``,
  ``block{k}.ffn.1``, ``.ffn.2`` for k = 0..blocks-1
* Caser: ``conv_h1`` .. ``conv_h4``, ``conv_v``, ``fc``

Embedding tables, biases and layer-norm parameters are never masked.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import window

ARCHS = ("SASRec", "Caser")
LINEAR, CONV_H, CONV_V = "linear", "conv-horizontal", "conv-vertical"
LN_EPS = 1e-8
NEG_INF = -1e9


@dataclass(frozen=True)
class Hyper:
    d: int = 64
    blocks: int = 2
    heads: int = 4
    max_len: int = 5
    horiz_filters: int = 4
    vert_filters: int = 16

    def validate(self, arch: str) -> None:
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        if min(self.d, self.max_len) < 1:
            raise ValueError("d and max_len must be positive")
        if arch == "SASRec" and (self.heads < 1 or self.d % self.heads):
            raise ValueError(f"heads={self.heads} does not divide d={self.d}")
        if arch == "SASRec" and self.blocks < 1:
            raise ValueError("need at least one block")
        if arch == "Caser" and min(self.horiz_filters, self.vert_filters) < 1:
            raise ValueError("filter counts must be positive")


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str
    shape: tuple[int, int]  # (d_out, d_in): rows are output units / filters
    kernel: tuple[int, ...]  # original kernel shape, for documentation and fan computation
    applications: int  # how many times the weight is applied per forward pass

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


@dataclass
class BackboneParams:
    arch: str
    n_items: int
    hyper: Hyper
    layers: list[LayerInfo]
    params: dict[str, np.ndarray]  # "<layer>.weight", "<layer>.bias", embeddings, norms

    def weight(self, name: str) -> np.ndarray:
        return self.params[f"{name}.weight"]

    def layer(self, name: str) -> LayerInfo:
        for info in self.layers:
            if info.name == name:
                return info
        raise KeyError(name)

    @property
    def maskable_count(self) -> int:
        return sum(info.size for info in self.layers)

    @property
    def network_param_count(self) -> int:
        """Every parameter except the embedding tables."""
        return sum(v.size for k, v in self.params.items() if not k.endswith("_emb"))

    def copy(self) -> "BackboneParams":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def _registry(arch: str, h: Hyper) -> list[LayerInfo]:
    d, L = h.d, h.max_len
    if arch == "SASRec":
        out = []
        for k in range(h.blocks):
            for part in ("q", "k", "v", "o"):
                out.append(LayerInfo(f"block{k}.attn.{part}", LINEAR, (d, d), (d, d), L))
            out.append(LayerInfo(f"block{k}.ffn.1", LINEAR, (d, d), (d, d), L))
            out.append(LayerInfo(f"block{k}.ffn.2", LINEAR, (d, d), (d, d), L))
        return out
    out = [
        LayerInfo(f"conv_h{ht}", CONV_H, (h.horiz_filters, ht * d), (h.horiz_filters, 1, ht, d), L - ht + 1)
        for ht in caser_heights(h)
    ]
    out.append(LayerInfo("conv_v", CONV_V, (h.vert_filters, L), (h.vert_filters, 1, L, 1), d))
    fc_in = h.vert_filters * d + h.horiz_filters * len(caser_heights(h))
    out.append(LayerInfo("fc", LINEAR, (d, fc_in), (d, fc_in), 1))
    return out


def caser_heights(h: Hyper) -> list[int]:
    return list(range(1, min(4, h.max_len) + 1))


def build_backbone(arch: str, n_items: int, hyper: Hyper = Hyper(), rng: nx.Rng | None = None) -> BackboneParams:
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    hyper.validate(arch)
    rng = rng or nx.Rng(0)
    layers = _registry(arch, hyper)
    params: dict[str, np.ndarray] = {}
    for info in layers:
        params[f"{info.name}.weight"] = nx.init_xavier_normal(info.kernel, rng).reshape(info.shape)
        params[f"{info.name}.bias"] = nx.init_bias_uniform(info.kernel, rng)
    params["item_emb"] = nx.init_xavier_normal((n_items, hyper.d), rng)
    if arch == "SASRec":
        params["pos_emb"] = nx.init_xavier_normal((hyper.max_len, hyper.d), rng)
        for k in range(hyper.blocks):
            for ln in ("ln1", "ln2"):
                params[f"block{k}.{ln}.gain"] = np.ones(hyper.d)
                params[f"block{k}.{ln}.shift"] = np.zeros(hyper.d)
        params["final_ln.gain"] = np.ones(hyper.d)
        params["final_ln.shift"] = np.zeros(hyper.d)
    return BackboneParams(arch, n_items, hyper, layers, params)


# --- forward -----------------------------------------------------------------

def _layer_norm(x, gain, shift):
    mu = nx.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = nx.mean(xc * xc, axis=-1, keepdims=True)
    return xc * nx.power(var + LN_EPS, -0.5) * gain + shift


def _linear(x, w, b):
    """``x @ w^T + b``; ``w`` is ``(d_out, d_in)`` or a batch ``(B, d_out, d_in)``."""
    return nx.matmul(x, nx.transpose(w)) + b


def _sasrec_hidden(bb: BackboneParams, P, W, ctx):
    h = bb.hyper
    B, L = ctx.shape
    dh = h.d // h.heads
    valid = (ctx >= 0).astype(float)[:, :, None]
    x = (nx.gather(P["item_emb"], ctx) + P["pos_emb"]) * valid
    causal = np.triu(np.ones((L, L), dtype=bool), k=1)
    blocked = causal[None, :, :] | (ctx < 0)[:, None, :]
    attn_bias = np.where(blocked, NEG_INF, 0.0)[:, None, :, :]
    for k in range(h.blocks):
        pre = f"block{k}"
        y = _layer_norm(x, P[f"{pre}.ln1.gain"], P[f"{pre}.ln1.shift"])

        def heads(t):
            return nx.transpose(nx.reshape(t, (B, L, h.heads, dh)), (0, 2, 1, 3))

        q = heads(_linear(y, W[f"{pre}.attn.q"], P[f"{pre}.attn.q.bias"]))
        kk = heads(_linear(y, W[f"{pre}.attn.k"], P[f"{pre}.attn.k.bias"]))
        v = heads(_linear(y, W[f"{pre}.attn.v"], P[f"{pre}.attn.v.bias"]))
        att = nx.softmax(nx.matmul(q, nx.transpose(kk)) * (1.0 / np.sqrt(dh)) + attn_bias)
        ctxv = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, L, h.d))
        x = x + _linear(ctxv, W[f"{pre}.attn.o"], P[f"{pre}.attn.o.bias"])
        y = _layer_norm(x, P[f"{pre}.ln2.gain"], P[f"{pre}.ln2.shift"])
        f = nx.relu(_linear(y, W[f"{pre}.ffn.1"], P[f"{pre}.ffn.1.bias"]))
        x = (x + _linear(f, W[f"{pre}.ffn.2"], P[f"{pre}.ffn.2.bias"])) * valid
    x = _layer_norm(x, P["final_ln.gain"], P["final_ln.shift"])
    return x[:, L - 1, :]


def _caser_hidden(bb: BackboneParams, P, W, ctx):
    h = bb.hyper
    B, L = ctx.shape
    img = nx.gather(P["item_emb"], ctx)
    pooled = []
    for ht in caser_heights(h):
        n_pos = L - ht + 1
        win = nx.concat([img[:, j:j + n_pos, :] for j in range(ht)], axis=-1)
        c = nx.tanh(_linear(win, W[f"conv_h{ht}"], P[f"conv_h{ht}.bias"]))
        pooled.append(nx.reduce_max(c, axis=1))
    vert = nx.matmul(W["conv_v"], img) + nx.reshape(P["conv_v.bias"], (h.vert_filters, 1))
    feats = nx.concat([nx.reshape(vert, (B, h.vert_filters * h.d))] + pooled, axis=-1)
    if W["fc"].data.ndim == 3:
        feats = nx.reshape(feats, (B, 1, feats.shape[-1]))
        return nx.reshape(nx.tanh(_linear(feats, W["fc"], P["fc.bias"])), (B, h.d))
    return nx.tanh(_linear(feats, W["fc"], P["fc.bias"]))


def hidden(bb: BackboneParams, P: dict, W: dict, contexts: np.ndarray) -> nx.Tensor:
    """Final sequence representation ``(B, d)``.

    ``P`` maps parameter names to tensors; ``W`` maps maskable layer names to
    effective weights, shared ``(d_out, d_in)`` or per-row ``(B, d_out, d_in)``.
    """
    ctx = np.asarray(contexts, dtype=np.int64)
    if ctx.ndim != 2 or ctx.shape[1] != bb.hyper.max_len:
        raise nx.ShapeError(f"contexts must be (B, {bb.hyper.max_len}); got {ctx.shape}")
    if (ctx[:, -1] < 0).any():
        raise ValueError("empty sequence")
    if ctx.max() >= bb.n_items:
        raise IndexError(f"unknown item id {int(ctx.max())}")
    fn = _sasrec_hidden if bb.arch == "SASRec" else _caser_hidden
    return fn(bb, P, W, ctx)


def score_all(bb: BackboneParams, P: dict, W: dict, contexts: np.ndarray) -> nx.Tensor:
    """Scores ``(B, n_items)``: dot product of the hidden state with every item embedding."""
    return nx.matmul(hidden(bb, P, W, contexts), nx.transpose(P["item_emb"]))


def constant_params(bb: BackboneParams) -> dict[str, nx.Tensor]:
    return {k: nx.Tensor(v) for k, v in bb.params.items()}


def dense_weights(P: dict[str, nx.Tensor], bb: BackboneParams) -> dict[str, nx.Tensor]:
    return {info.name: P[f"{info.name}.weight"] for info in bb.layers}


# --- diets -------------------------------------------------------------------

class DietError(ValueError):
    pass


def keep_count(n: int, keep_ratio: float) -> int:
    """``max(1, round_half_up(keep_ratio * n))``."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1]; got {keep_ratio}")
    return max(1, min(n, int(np.floor(keep_ratio * n + 0.5))))


@dataclass
class Diet:
    """Per-layer boolean masks in registry order."""

    masks: dict[str, np.ndarray]
    keep_ratio: float
    shapes: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.shapes:
            self.shapes = {k: tuple(m.shape) for k, m in self.masks.items()}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    @property
    def ones(self) -> int:
        return sum(int(m.sum()) for m in self.masks.values())

    def __eq__(self, other):
        return (
            isinstance(other, Diet)
            and list(self.masks) == list(other.masks)
            and all(np.array_equal(self.masks[k], other.masks[k]) for k in self.masks)
            and self.shapes == other.shapes
        )

    @classmethod
    def full(cls, bb: BackboneParams) -> "Diet":
        return cls({i.name: np.ones(i.shape, dtype=bool) for i in bb.layers}, 1.0)


@dataclass
class MaskedBackbone:
    backbone: BackboneParams
    diet: Diet

    def effective_weight(self, name: str) -> np.ndarray:
        return self.backbone.weight(name) * self.diet.masks[name]

    def effective_weights(self) -> dict[str, np.ndarray]:
        return {i.name: self.effective_weight(i.name) for i in self.backbone.layers}


def apply_diet(bb: BackboneParams, diet: Diet, validate: bool = True) -> MaskedBackbone:
    names = [i.name for i in bb.layers]
    if list(diet.masks) != names:
        raise DietError(f"diet layers {list(diet.masks)} do not match registry {names}")
    for info in bb.layers:
        m = diet.masks[info.name]
        if tuple(m.shape) != info.shape:
            raise DietError(f"{info.name}: mask shape {m.shape} != weight shape {info.shape}")
        if validate and int(m.sum()) != keep_count(info.size, diet.keep_ratio):
            raise DietError(
                f"{info.name}: {int(m.sum())} ones, expected {keep_count(info.size, diet.keep_ratio)}"
            )
    return MaskedBackbone(bb, diet)


def forward_scores(mb: MaskedBackbone, seq) -> np.ndarray:
    """Score of every item as the next interaction after ``seq`` (last ``max_len`` items used)."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    return forward_scores_batch(mb, window(seq, mb.backbone.hyper.max_len)[None, :])[0]


def forward_scores_batch(mb: MaskedBackbone, contexts: np.ndarray) -> np.ndarray:
    bb = mb.backbone
    P = constant_params(bb)
    W = {k: nx.Tensor(v) for k, v in mb.effective_weights().items()}
    return score_all(bb, P, W, contexts).data


# --- checkpoint container ----------------------------------------------------
# Little-endian layout:
#   b"DIET" | u16 version | u8 arch tag (0 SASRec, 1 Caser) |
#   u32 n_items, d, blocks, heads, max_len, horiz_filters, vert_filters |
#   u16 n_sections, then per section:
#     4-byte tag | u32 n_arrays | per array: u16 name_len, name (utf-8),
#     u8 ndim, ndim * u32 dims, prod(dims) * f64 values (row-major)
# The backbone is section b"BKBN" with arrays in registry order (weight, bias
# per layer) followed by the remaining parameters in insertion order.

CKPT_MAGIC = b"DIET"
CKPT_VERSION = 1
BACKBONE_TAG = b"BKBN"


class CheckpointError(ValueError):
    pass


def _pack_arrays(tag: bytes, arrays: dict[str, np.ndarray]) -> bytes:
    out = [tag, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def encode_checkpoint(bb: BackboneParams, sections: dict[bytes, dict[str, np.ndarray]] | None = None) -> bytes:
    h = bb.hyper
    head = CKPT_MAGIC + struct.pack(
        "<HB7I", CKPT_VERSION, ARCHS.index(bb.arch), bb.n_items,
        h.d, h.blocks, h.heads, h.max_len, h.horiz_filters, h.vert_filters,
    )
    ordered = {}
    for info in bb.layers:
        ordered[f"{info.name}.weight"] = bb.params[f"{info.name}.weight"]
        ordered[f"{info.name}.bias"] = bb.params[f"{info.name}.bias"]
    ordered.update((k, v) for k, v in bb.params.items() if k not in ordered)
    all_sections = {BACKBONE_TAG: ordered, **(sections or {})}
    body = [_pack_arrays(tag, arrs) for tag, arrs in all_sections.items()]
    return head + struct.pack("<H", len(body)) + b"".join(body)


def decode_checkpoint(buf: bytes) -> tuple[BackboneParams, dict[bytes, dict[str, np.ndarray]]]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, arch_tag, n_items, *hyper = struct.unpack_from("<HB7I", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        pos = 4 + struct.calcsize("<HB7I")
        (n_sections,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        sections = {}
        for _ in range(n_sections):
            tag = buf[pos:pos + 4]
            (n_arrays,) = struct.unpack_from("<I", buf, pos + 4)
            pos += 8
            arrays = {}
            for _ in range(n_arrays):
                (nlen,) = struct.unpack_from("<H", buf, pos)
                name = buf[pos + 2:pos + 2 + nlen].decode()
                pos += 2 + nlen
                (ndim,) = struct.unpack_from("<B", buf, pos)
                dims = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
                pos += 1 + 4 * ndim
                count = int(np.prod(dims)) if ndim else 1
                if pos + 8 * count > len(buf):
                    raise CheckpointError("truncated array payload")
                arrays[name] = np.frombuffer(buf, "<f8", count, pos).reshape(dims).astype(np.float64)
                pos += 8 * count
            sections[tag] = arrays
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if BACKBONE_TAG not in sections:
        raise CheckpointError("missing backbone section")
    arch = ARCHS[arch_tag]
    hp = Hyper(*hyper)
    bb = BackboneParams(arch, n_items, hp, _registry(arch, hp), sections.pop(BACKBONE_TAG))
    return bb, sections


def save_checkpoint(path: str | Path, bb: BackboneParams, sections=None) -> None:
    Path(path).write_bytes(encode_checkpoint(bb, sections))


def load_checkpoint(path: str | Path):
    return decode_checkpoint(Path(path).read_bytes())

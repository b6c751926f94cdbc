"""Edge-cloud accounting: diet wire format, bit/FLOP/storage costs, session simulation.

Wire layout (little-endian)::

    b"DIETv1" | u16 n_layers |
    n_layers * (u64 name hash, u32 element count, u32 keep count) |
    per layer: ceil(count / 8) bytes of mask bits, LSB-first, row-major

The name hash is the first 8 bytes of BLAKE2b over the UTF-8 layer name.
Decoding needs the layer registry of the backbone the edge already holds,
since the header carries no shapes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import (
    BackboneParams, Diet, LayerInfo, MaskedBackbone, apply_diet, forward_scores_batch, keep_count,
)
from .data import Split, window
from .dietgen import generate_diet, generate_masks
from .metrics import target_ranks

WIRE_MAGIC = b"DIETv1"
HEADER_BITS = 8 * (len(WIRE_MAGIC) + 2)
LAYER_HEADER_BITS = 8 * 16
POLICIES = ("per-session", "on-shift")
STORAGE_MODES = ("DIET", "DIETING")


class WireError(ValueError):
    """Malformed diet payload; ``reason`` is a short machine-readable code."""

    def __init__(self, reason: str, detail: str = "", offset: int | None = None):
        self.reason = reason
        self.detail = detail
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{reason}{where}: {detail}" if detail else f"{reason}{where}")


def name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


# --- wire --------------------------------------------------------------------

def encode_diet(diet: Diet) -> bytes:
    head = [WIRE_MAGIC, struct.pack("<H", len(diet.masks))]
    body = []
    for name, m in diet.masks.items():
        bits = np.ascontiguousarray(m, dtype=bool).reshape(-1)
        head.append(struct.pack("<QII", name_hash(name), bits.size, int(bits.sum())))
        body.append(np.packbits(bits, bitorder="little").tobytes())
    return b"".join(head + body)


def decode_diet(buf: bytes, layers: list[LayerInfo], keep_ratio: float | None = None) -> Diet:
    """Inverse of :func:`encode_diet` against the edge's layer registry.

    Every header entry must name a registry layer (in registry order), carry
    its element count, and agree with the popcount of its payload.  With
    ``keep_ratio`` given, keep counts must also match that ratio.
    """
    buf = bytes(buf)
    if len(buf) < len(WIRE_MAGIC) + 2 or buf[: len(WIRE_MAGIC)] != WIRE_MAGIC:
        raise WireError("bad-magic", "payload does not start with DIETv1", 0)
    (n_layers,) = struct.unpack_from("<H", buf, len(WIRE_MAGIC))
    if n_layers != len(layers):
        raise WireError("layer-count", f"header has {n_layers} layers, registry {len(layers)}", len(WIRE_MAGIC))
    off = len(WIRE_MAGIC) + 2
    if len(buf) < off + 16 * n_layers:
        raise WireError("truncated", "header ends early", len(buf))
    entries = [struct.unpack_from("<QII", buf, off + 16 * j) for j in range(n_layers)]
    off += 16 * n_layers

    masks, counts = {}, []
    for j, (info, (h, n, k)) in enumerate(zip(layers, entries)):
        at = len(WIRE_MAGIC) + 2 + 16 * j
        if h != name_hash(info.name):
            raise WireError("name-hash", f"entry {j} does not match layer {info.name}", at)
        if n != info.size:
            raise WireError("element-count", f"{info.name}: {n} elements, expected {info.size}", at + 8)
        if k > n:
            raise WireError("keep-count", f"{info.name}: keep {k} exceeds {n} elements", at + 12)
        nbytes = -(-n // 8)
        if len(buf) < off + nbytes:
            raise WireError("truncated", f"{info.name}: payload ends early", len(buf))
        raw = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off)
        bits = np.unpackbits(raw, bitorder="little")
        if bits[n:].any():
            raise WireError("padding", f"{info.name}: nonzero padding bits", off + nbytes - 1)
        bits = bits[:n].astype(bool)
        if int(bits.sum()) != k:
            raise WireError("popcount", f"{info.name}: {int(bits.sum())} ones, header says {k}", at + 12)
        if keep_ratio is not None and k != keep_count(n, keep_ratio):
            raise WireError("keep-count", f"{info.name}: keep {k} inconsistent with ratio {keep_ratio}", at + 12)
        masks[info.name] = bits.reshape(info.shape)
        counts.append((n, k))
        off += nbytes
    if off != len(buf):
        raise WireError("trailing-bytes", f"{len(buf) - off} bytes after last layer", off)
    if keep_ratio is None:
        keep_ratio = sum(k for _, k in counts) / max(1, sum(n for n, _ in counts))
    return Diet(masks, keep_ratio)


def wire_bits(diet: Diet) -> int:
    """Exact size of the encoded diet in bits (header plus byte-aligned payload)."""
    payload = sum(8 * -(-int(np.prod(s)) // 8) for s in diet.shapes.values())
    return HEADER_BITS + LAYER_HEADER_BITS * len(diet.masks) + payload


# --- cost formulas -----------------------------------------------------------

def transmission_bits(method: str, n_params: int, nonzero_fraction: float = 1.0) -> float:
    """Bits to ship ``n_params`` weights: dense 32N, csr 64αN, binary N (no header)."""
    if n_params < 0:
        raise ValueError("n_params must be non-negative")
    if not 0.0 <= nonzero_fraction <= 1.0:
        raise ValueError("nonzero_fraction must lie in [0, 1]")
    if method == "dense":
        return 32 * n_params
    if method == "csr":
        return 32 * 2 * nonzero_fraction * n_params
    if method == "binary":
        return n_params
    raise ValueError(f"unknown method {method!r}")


def dense_shipping_bits(bb: BackboneParams) -> int:
    """Base-style refresh: every non-embedding parameter as float32."""
    return 32 * bb.network_param_count


def _applications(info: LayerInfo, bb: BackboneParams, seq_len: int) -> int:
    if bb.arch == "SASRec":
        return seq_len
    # Caser convolves the padded window, so positions follow max_len
    return info.applications


def count_flops(mb: MaskedBackbone, seq_len: int | None = None) -> int:
    """Multiply-accumulates of weight application for one forward pass.

    Rows (output units / filters) whose mask is all zero are skipped;
    embedding lookups, norms and the final item scoring are not counted.
    """
    bb = mb.backbone
    seq_len = bb.hyper.max_len if seq_len is None else seq_len
    if not 1 <= seq_len <= bb.hyper.max_len:
        raise ValueError(f"seq_len must be in [1, {bb.hyper.max_len}]")
    total = 0
    for info in bb.layers:
        live = int(np.asarray(mb.diet.masks[info.name]).any(axis=1).sum())
        total += live * info.shape[1] * _applications(info, bb, seq_len)
    return total


def dense_flops(bb: BackboneParams, seq_len: int | None = None) -> int:
    seq_len = bb.hyper.max_len if seq_len is None else seq_len
    return sum(i.size * _applications(i, bb, seq_len) for i in bb.layers)


def storage_bits(mode: str, bb: BackboneParams, n_scenarios: int) -> int:
    """Edge storage for ``n_scenarios`` diets over one backbone.

    DIET keeps every frozen layer weight once; DIETING keeps only the shared
    buffer, whose size is the largest layer.  Each scenario adds one mask bit
    per maskable weight.
    """
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    if mode not in STORAGE_MODES:
        raise ValueError(f"mode must be one of {STORAGE_MODES}")
    masks = n_scenarios * bb.maskable_count
    if mode == "DIET":
        return 32 * bb.maskable_count + masks
    return 32 * max(i.size for i in bb.layers) + masks


# --- zero rows ---------------------------------------------------------------

def zero_row_fractions(masks: dict[str, np.ndarray]) -> dict[str, float]:
    """Mean fraction of all-zero rows per layer; masks are ``(B, d_out, d_in)``."""
    return {k: float((~np.asarray(m).any(axis=-1)).mean()) for k, m in masks.items()}


def zero_row_series(stack, bb: BackboneParams, contexts: np.ndarray) -> list[dict]:
    """Per-layer zero-row fractions with and without the row correction."""
    before = zero_row_fractions(generate_masks(stack, bb, contexts, corrected=False))
    after = zero_row_fractions(generate_masks(stack, bb, contexts, corrected=True))
    return [{"layer": k, "uncorrected": before[k], "corrected": after[k]} for k in before]


# --- session simulation ------------------------------------------------------

@dataclass(frozen=True)
class SessionEvent:
    user: int
    item: int
    timestamp: int
    interest_shift: bool = False


@dataclass
class CostReport:
    transmit_bits: int = 0
    storage_bits: int = 0
    flops: int = 0
    ndcg_at_10: float = 0.0
    hit_at_10: float = 0.0
    refreshes: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")


@dataclass
class SimulationResult:
    per_user: dict[int, CostReport]
    aggregate: CostReport
    policy: str
    mode: str
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(asdict(CostReport()))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user"] + cols)
        for u in sorted(self.per_user):
            r = asdict(self.per_user[u])
            w.writerow([u] + [repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        a = asdict(self.aggregate)
        w.writerow(["all"] + [repr(a[c]) if isinstance(a[c], float) else a[c] for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "policy": self.policy, **self.meta,
                           "aggregate": asdict(self.aggregate),
                           "per_user": {str(u): asdict(self.per_user[u]) for u in sorted(self.per_user)}},
                          indent=2, sort_keys=True)


def events_from_split(split: Split, session_length: int = 5, session_gap: int = 3600,
                      shift_prob: float = 0.0, seed: int = 0) -> dict[int, list[SessionEvent]]:
    """Replay each test user's context as events.

    Items are spaced one minute apart, with a ``session_gap`` jump every
    ``session_length`` events; each event is flagged as an interest shift
    with probability ``shift_prob`` (seeded).
    """
    if session_length < 1:
        raise ValueError("session_length must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {}
    for u, ctx in zip(split.test_users.tolist(), split.test_contexts):
        t, evs = 0, []
        for j, item in enumerate(np.asarray(ctx).tolist()):
            if j and j % session_length == 0:
                t += session_gap
            evs.append(SessionEvent(u, int(item), t, bool(rng.random() < shift_prob)))
            t += 60
        out[u] = evs
    return out


def refresh_points(events: list[SessionEvent], policy: str, session_gap: int = 3600) -> list[int]:
    """Indices of events after which the edge asks for a new diet."""
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if not events:
        return []
    if any(b.timestamp < a.timestamp for a, b in zip(events, events[1:])):
        raise ValueError("events must be time-ordered")
    points = [0]
    for j in range(1, len(events)):
        if policy == "per-session" and events[j].timestamp - events[j - 1].timestamp >= session_gap:
            points.append(j)
        elif policy == "on-shift" and events[j].interest_shift:
            points.append(j)
    return points


def simulate_session(model, events: dict[int, list[SessionEvent]], policy: str = "per-session",
                     targets: dict[int, int] | None = None, session_gap: int = 3600,
                     n: int = 10, exclude_history: bool = True) -> SimulationResult:
    """Run the refresh protocol for every edge and account its costs.

    ``model`` is a trained :class:`dietlab.trainer.Model`.  At each refresh
    the cloud builds a diet from the history seen so far, encodes it, and the
    edge decodes and applies it; Base ships its dense weights instead.  After
    the last event the edge's cached model ranks the catalogue for the user's
    target (when ``targets`` has one).
    """
    bb = model.serving_backbone
    mode = model.mode
    dense = mode == "base"
    storage_mode = "DIETING" if mode == "DIETING" else "DIET"
    per_user = {}
    for u in sorted(events):
        evs = events[u]
        if not evs:
            continue
        items = np.array([e.item for e in evs], dtype=np.int64)
        if items.min() < 0 or items.max() >= bb.n_items:
            raise IndexError(f"user {u}: item outside the embedding table")
        rep = CostReport()
        cached = None
        for j in refresh_points(evs, policy, session_gap):
            seq = items[: j + 1]
            rep.refreshes += 1
            if dense:
                rep.transmit_bits += dense_shipping_bits(bb)
                continue
            if model.stack is not None:
                diet = generate_diet(model.stack, seq, bb)
            else:
                diet = model.fixed_diet
            wire = encode_diet(diet)
            rep.transmit_bits += 8 * len(wire)
            cached = apply_diet(bb, decode_diet(wire, bb.layers, diet.keep_ratio))
        if dense:
            cached = apply_diet(bb, Diet.full(bb))
            rep.storage_bits = 32 * bb.network_param_count
        else:
            rep.storage_bits = storage_bits(storage_mode, bb, 1)
        rep.flops = count_flops(cached, min(len(items), bb.hyper.max_len))
        if targets is not None and u in targets:
            ctx = window(items, bb.hyper.max_len)[None, :]
            scores = forward_scores_batch(cached, ctx)
            rank = int(target_ranks(scores, np.array([targets[u]]), [items] if exclude_history else None)[0])
            if rank <= n:
                rep.ndcg_at_10 = float(1.0 / np.log2(rank + 1.0))
                rep.hit_at_10 = 1.0
        per_user[u] = rep

    scored = [u for u in per_user if targets is not None and u in targets]
    agg = CostReport(
        transmit_bits=sum(r.transmit_bits for r in per_user.values()),
        storage_bits=sum(r.storage_bits for r in per_user.values()),
        flops=sum(r.flops for r in per_user.values()),
        ndcg_at_10=float(np.mean([per_user[u].ndcg_at_10 for u in scored])) if scored else 0.0,
        hit_at_10=float(np.mean([per_user[u].hit_at_10 for u in scored])) if scored else 0.0,
        refreshes=sum(r.refreshes for r in per_user.values()),
    )
    return SimulationResult(per_user, agg, policy, mode, {"users": len(per_user), "scored": len(scored)})

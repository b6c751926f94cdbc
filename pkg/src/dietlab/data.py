"""Interaction-log ingestion, k-core filtering, splits and sequence samples.

Two raw grammars are accepted:

* ``tab``           ``user<TAB>item<TAB>rating<TAB>timestamp`` (MovieLens-100K ``u.data``)
* ``double-colon``  ``user::item::rating::timestamp`` (MovieLens-1M ``ratings.dat``)
* ``csv``           ``user,item,rating,timestamp`` (upstream export of Amazon reviews;
                    user/item may be arbitrary strings)

Timestamp ties inside one user are broken by original file order.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("tab", "double-colon", "csv")
SPLIT_KINDS = ("leave-one-out", "user-80-20")
CACHE_MAGIC = b"DIETSPLT"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class InteractionLog:
    """Flat interaction records.

    ``users``/``items`` hold dense ids in ``[0, n_users)``/``[0, n_items)``;
    ``user_ids``/``item_ids`` map a dense id back to the raw id from the file.
    Record order is the original file order.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def select(self, keep: np.ndarray) -> "InteractionLog":
        """Subset of records; ids are re-densified and unused ids dropped."""
        return _reindex(
            self.user_ids[self.users[keep]],
            self.item_ids[self.items[keep]],
            self.ratings[keep],
            self.timestamps[keep],
        )

    def sequences(self) -> dict[int, np.ndarray]:
        """Per-user item sequences in chronological order (stable on ties)."""
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.users))
        users = self.users[order]
        items = self.items[order]
        bounds = np.flatnonzero(np.diff(users)) + 1
        return {
            int(chunk_users[0]): chunk_items
            for chunk_users, chunk_items in zip(np.split(users, bounds), np.split(items, bounds))
            if len(chunk_users)
        }


def _reindex(raw_users, raw_items, ratings, timestamps) -> InteractionLog:
    user_ids, users = np.unique(raw_users, return_inverse=True)
    item_ids, items = np.unique(raw_items, return_inverse=True)
    return InteractionLog(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
        timestamps=np.asarray(timestamps, dtype=np.int64),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def parse_interactions(path: str | Path, fmt: str = "tab") -> InteractionLog:
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    sep = {"tab": "\t", "double-colon": "::", "csv": ","}[fmt]
    raw_users, raw_items, ratings, stamps = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            u, i, r, t = (p.strip() for p in parts)
            try:
                if fmt != "csv":
                    u, i = int(u), int(i)
                rating = float(r)
                stamp = int(t)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            raw_users.append(u)
            raw_items.append(i)
            ratings.append(rating)
            stamps.append(stamp)
    if not raw_users:
        empty = np.zeros(0, dtype=np.int64)
        return InteractionLog(empty, empty, np.zeros(0), empty, empty, empty)
    return _reindex(np.asarray(raw_users), np.asarray(raw_items), ratings, stamps)


def keep_positive(log_: InteractionLog, threshold: float = 4.0) -> InteractionLog:
    """Keep records with ``rating >= threshold``."""
    return log_.select(log_.ratings >= threshold)


def kcore_filter(log_: InteractionLog, k: int) -> InteractionLog:
    """Drop users and items with fewer than ``k`` records until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(log_), dtype=bool)
    while True:
        u_deg = np.bincount(log_.users[keep], minlength=log_.n_users)
        i_deg = np.bincount(log_.items[keep], minlength=log_.n_items)
        ok = keep & (u_deg[log_.users] >= k) & (i_deg[log_.items] >= k)
        if ok.sum() == keep.sum():
            break
        keep = ok
    if not keep.any() and len(log_):
        warnings.warn(f"{k}-core filter removed every interaction", stacklevel=2)
    return log_.select(keep)


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "leave-one-out"
    k_core: int = 20
    seed: int = 0
    positive_threshold: float = 4.0

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.k_core < 1:
            raise ValueError("k_core must be >= 1")


@dataclass
class Split:
    """Training sequences plus held-out (context, target) cases.

    ``test_users[j]`` is evaluated by scoring ``test_targets[j]`` given
    ``test_contexts[j]`` (full chronological history before the target).
    """

    n_items: int
    train: dict[int, np.ndarray]
    test_users: np.ndarray
    test_contexts: list[np.ndarray]
    test_targets: np.ndarray
    history: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.test_users)


def split(log_: InteractionLog, spec: SplitSpec) -> Split:
    seqs = log_.sequences()
    train: dict[int, np.ndarray] = {}
    test_users, contexts, targets = [], [], []
    if spec.kind == "leave-one-out":
        for user, seq in seqs.items():
            if len(seq) < 2:
                warnings.warn(f"user {user} has a single interaction; dropped", stacklevel=2)
                continue
            train[user] = seq[:-1]
            test_users.append(user)
            contexts.append(seq[:-1])
            targets.append(int(seq[-1]))
    else:
        users = np.array(sorted(seqs), dtype=np.int64)
        perm = np.random.Generator(np.random.PCG64(spec.seed)).permutation(users)
        n_train = int(np.floor(0.8 * len(users)))
        for user in sorted(int(u) for u in perm[:n_train]):
            train[user] = seqs[user]
        for user in sorted(int(u) for u in perm[n_train:]):
            seq = seqs[user]
            if len(seq) < 2:
                warnings.warn(f"user {user} has a single interaction; dropped", stacklevel=2)
                continue
            test_users.append(user)
            contexts.append(seq[:-1])
            targets.append(int(seq[-1]))
    return Split(
        n_items=log_.n_items,
        train=train,
        test_users=np.asarray(test_users, dtype=np.int64),
        test_contexts=contexts,
        test_targets=np.asarray(targets, dtype=np.int64),
        history={u: c for u, c in zip(test_users, contexts)},
    )


PAD = -1


def window(seq: np.ndarray, max_len: int) -> np.ndarray:
    """Last ``max_len`` items, left-padded with ``PAD``."""
    out = np.full(max_len, PAD, dtype=np.int64)
    tail = np.asarray(seq[-max_len:], dtype=np.int64)
    if len(tail):
        out[max_len - len(tail):] = tail
    return out


@dataclass
class Samples:
    """Fixed-width (context, target) training pairs; contexts are left-padded."""

    users: np.ndarray
    contexts: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def build_sequences(train: dict[int, np.ndarray], max_len: int = 5) -> Samples:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    users, contexts, targets = [], [], []
    for user in sorted(train):
        seq = train[user]
        for j in range(1, len(seq)):
            users.append(user)
            contexts.append(window(seq[:j], max_len))
            targets.append(int(seq[j]))
    return Samples(
        users=np.asarray(users, dtype=np.int64),
        contexts=np.asarray(contexts, dtype=np.int64).reshape(-1, max_len),
        targets=np.asarray(targets, dtype=np.int64),
    )


def load_dataset(path: str | Path, fmt: str, spec: SplitSpec) -> tuple[InteractionLog, Split]:
    raw = parse_interactions(path, fmt)
    filtered = kcore_filter(keep_positive(raw, spec.positive_threshold), spec.k_core)
    log.info("%s: %d users, %d items, %d interactions after filtering",
             path, filtered.n_users, filtered.n_items, len(filtered))
    return filtered, split(filtered, spec)


def markov_dataset(n_users: int = 200, n_items: int = 30, length: int = 12, seed: int = 0) -> InteractionLog:
    """Synthetic toy log (not paper data): each user starts at a random item and
    then always moves to ``(item * 7 + 3) % n_items``, so the next item is a
    deterministic function of the last one."""
    rng = np.random.Generator(np.random.PCG64(seed))
    users, items, stamps = [], [], []
    for u in range(n_users):
        item = int(rng.integers(n_items))
        for t in range(length):
            users.append(u)
            items.append(item)
            stamps.append(t)
            item = (item * 7 + 3) % n_items
    return _reindex(np.asarray(users), np.asarray(items), np.full(len(users), 5.0), stamps)


# --- split cache -----------------------------------------------------------
# Layout (little-endian): magic "DIETSPLT", u16 version, 32-byte sha256 key,
# u32 n_items, u32 n_train_users, then per train user (u32 user, u32 len,
# len*u32 items); u32 n_test, then per test case (u32 user, u32 target,
# u32 len, len*u32 context items).

def cache_key(path: str | Path, fmt: str, spec: SplitSpec) -> bytes:
    h = hashlib.sha256(Path(path).read_bytes())
    h.update(repr((fmt, spec.kind, spec.k_core, spec.seed, spec.positive_threshold)).encode())
    return h.digest()


def _u32(values) -> bytes:
    return np.asarray(values, dtype="<u4").tobytes()


def write_split_cache(out: str | Path, key: bytes, sp: Split) -> None:
    parts = [CACHE_MAGIC, np.uint16(CACHE_VERSION).astype("<u2").tobytes(), key,
             _u32([sp.n_items, len(sp.train)])]
    for user in sorted(sp.train):
        seq = sp.train[user]
        parts += [_u32([user, len(seq)]), _u32(seq)]
    parts.append(_u32([len(sp)]))
    for user, ctx, tgt in zip(sp.test_users, sp.test_contexts, sp.test_targets):
        parts += [_u32([user, tgt, len(ctx)]), _u32(ctx)]
    Path(out).write_bytes(b"".join(parts))


def read_split_cache(path: str | Path, key: bytes | None = None) -> Split:
    buf = Path(path).read_bytes()
    if buf[:8] != CACHE_MAGIC:
        raise DataError("not a split cache (bad magic)")
    version = int(np.frombuffer(buf, "<u2", 1, 8)[0])
    if version != CACHE_VERSION:
        raise DataError(f"unsupported split cache version {version}")
    stored = buf[10:42]
    if key is not None and stored != key:
        raise DataError("split cache key mismatch")
    if (len(buf) - 42) % 4:
        raise DataError("truncated split cache")
    words = np.frombuffer(buf, "<u4", offset=42).astype(np.int64)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(words):
            raise DataError("truncated split cache")
        out = words[pos:pos + n]
        pos += n
        return out

    n_items, n_train = take(2)
    train = {}
    for _ in range(n_train):
        user, length = take(2)
        train[int(user)] = take(length).copy()
    (n_test,) = take(1)
    users, targets, contexts = [], [], []
    for _ in range(n_test):
        user, tgt, length = take(3)
        users.append(int(user))
        targets.append(int(tgt))
        contexts.append(take(length).copy())
    return Split(
        n_items=int(n_items),
        train=train,
        test_users=np.asarray(users, dtype=np.int64),
        test_contexts=contexts,
        test_targets=np.asarray(targets, dtype=np.int64),
        history={u: c for u, c in zip(users, contexts)},
    )

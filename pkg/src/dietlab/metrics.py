"""NDCG@N / Hit@N with a single held-out target per user."""
from __future__ import annotations

import math

import numpy as np

from .data import Split, window


def top_n(scores: np.ndarray, n: int, exclude=None) -> list[int]:
    """Ids of the ``n`` highest scores, descending; ties go to the lower id."""
    s = np.asarray(scores, dtype=float).copy()
    if exclude is not None and len(exclude):
        s[np.asarray(exclude, dtype=np.int64)] = -np.inf
    order = np.lexsort((np.arange(len(s)), -s))
    return [int(i) for i in order[:n] if np.isfinite(s[i])]


def ndcg_at_n(ranked, target: int, n: int = 10) -> float:
    if n < 1:
        raise ValueError("N must be >= 1")
    for rank, item in enumerate(list(ranked)[:n], start=1):
        if item == target:
            return 1.0 / math.log2(rank + 1)
    return 0.0


def hit_at_n(ranked, target: int, n: int = 10) -> int:
    if n < 1:
        raise ValueError("N must be >= 1")
    return int(target in list(ranked)[:n])


def target_ranks(scores: np.ndarray, targets: np.ndarray, exclude: list | None = None) -> np.ndarray:
    """1-based rank of each target in its row, with the same tie rule as :func:`top_n`."""
    s = np.array(scores, dtype=float)
    if exclude is not None:
        for row, items in enumerate(exclude):
            items = np.asarray(items, dtype=np.int64)
            s[row, items[items != targets[row]]] = -np.inf
    t = s[np.arange(len(s)), targets]
    ids = np.arange(s.shape[1])
    better = (s > t[:, None]) | ((s == t[:, None]) & (ids[None, :] < targets[:, None]))
    return better.sum(axis=1) + 1


def evaluate(model, split: Split, n: int = 10, exclude_history: bool = True, batch_size: int = 256) -> dict:
    """Mean NDCG@n and Hit@n over the test cases of ``split``.

    ``model`` is anything with ``score(contexts) -> (B, n_items)`` and a
    ``backbone.hyper.max_len``.  With ``exclude_history`` the items in a
    user's context are removed from the candidates (never the target itself).
    """
    if len(split) == 0:
        raise ValueError("empty test split")
    max_len = model.backbone.hyper.max_len
    contexts = np.stack([window(c, max_len) for c in split.test_contexts])
    ndcg = np.zeros(len(split))
    hit = np.zeros(len(split))
    for lo in range(0, len(split), batch_size):
        sl = slice(lo, lo + batch_size)
        scores = model.score(contexts[sl])
        excl = split.test_contexts[sl] if exclude_history else None
        ranks = target_ranks(scores, split.test_targets[sl], excl)
        inside = ranks <= n
        ndcg[sl] = np.where(inside, 1.0 / np.log2(ranks + 1.0), 0.0)
        hit[sl] = inside
    return {"ndcg": float(ndcg.sum() / len(split)), "hit": float(hit.sum() / len(split)), "users": len(split)}

"""Rank-based metrics for implicit feedback.

Every metric takes ``ranks``: one array per evaluated user holding the
1-based predicted ranks of that user's test items.  All four follow the
per-user sums as written, averaged over users; in particular NDCG and MAR
are *not* normalized per user, and NDCG uses a base-2 logarithm.

Sums use ``math.fsum``, so a metric does not depend on the order in which
users or items are listed.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

NDCG_LOG_BASE = 2


def _check(ranks: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(ranks) == 0:
        raise ValueError("no users to evaluate")
    out = [np.asarray(r, dtype=np.int64) for r in ranks]
    for r in out:
        if len(r) == 0:
            raise ValueError("every evaluated user needs at least one test item")
        if r.min() < 1:
            raise ValueError("ranks are 1-based")
    return out


def _user_mean(per_user: list[float]) -> float:
    return math.fsum(per_user) / len(per_user)


def recall_at(ranks: Sequence[np.ndarray], T: int = 50) -> float:
    ranks = _check(ranks)
    return _user_mean([int(np.sum(r <= T)) / min(T, len(r)) for r in ranks])


def ndcg(ranks: Sequence[np.ndarray]) -> float:
    ranks = _check(ranks)
    return _user_mean([math.fsum(1.0 / math.log2(x + 1) for x in r.tolist()) for r in ranks])


def mrr(ranks: Sequence[np.ndarray]) -> float:
    ranks = _check(ranks)
    return _user_mean([math.fsum(1.0 / x for x in r.tolist()) for r in ranks])


def mar(ranks: Sequence[np.ndarray]) -> float:
    """Mean (over users) of the summed ranks; lower is better."""
    ranks = _check(ranks)
    return _user_mean([float(sum(r.tolist())) for r in ranks])


def ranks_of(ranking: np.ndarray, test_items) -> np.ndarray:
    """1-based positions of ``test_items`` within ``ranking``."""
    ranking = np.asarray(ranking, dtype=np.int64)
    pos = np.full(int(ranking.max()) + 1 if len(ranking) else 0, -1, dtype=np.int64)
    pos[ranking] = np.arange(1, len(ranking) + 1)
    items = np.asarray(list(test_items), dtype=np.int64)
    if len(items) and (items.max() >= len(pos) or (pos[items] < 0).any()):
        raise KeyError("test item missing from ranking")
    return pos[items]


def all_metrics(ranks: Sequence[np.ndarray], T: int = 50) -> dict[str, float]:
    return {"recall": recall_at(ranks, T), "ndcg": ndcg(ranks), "mrr": mrr(ranks),
            "mar": mar(ranks)}

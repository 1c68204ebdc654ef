"""Rolling one-step-ahead evaluation of dPF and the static PF baselines.

For an evaluation step ``t`` every model sees the history ``0 .. t-1``:

* ``dPF``     fits the dynamic model on all past steps;
* ``PF-all``  collapses all past steps into a single static step;
* ``PF-last`` keeps only step ``t-1``.

The static baselines are the same model restricted to one step (global
factors plus one static correction), not a gamma-Poisson factorization.
Test users, test items and candidate items are defined from the full
history for all three, so the models are ranked on identical lists: the
candidates are all items seen before ``t`` minus the user's own past
items, and test items already in the user's history are dropped.
"""

from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionTensor, collapse_steps, rolling_split
from .inference import FitConfig, fit
from .metrics import all_metrics
from .model import Hyperparams
from .predict import log_score_matrix, rank_scores

logger = logging.getLogger(__name__)

MODEL_KINDS = ("dPF", "PF-all", "PF-last")
METRIC_NAMES = ("recall", "mar", "mrr", "ndcg")


@dataclass
class FoldResult:
    step: int
    metrics: dict[str, float]
    n_users: int
    skipped_users: int
    dropped_users: int
    dropped_items: int
    dropped_entries: int
    repeat_entries: int


@dataclass
class MetricReport:
    model_kind: str
    folds: list[FoldResult]
    recall_cutoff: int = 50
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def mean(self) -> dict[str, float]:
        """Unweighted average over folds."""
        return {k: float(np.mean([f.metrics[k] for f in self.folds])) for k in METRIC_NAMES}

    @property
    def n_users(self) -> int:
        return sum(f.n_users for f in self.folds)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for key, value in self.metadata.items():
            buf.write(f"# {key}: {value}\n")
        cols = ["model", "step", f"recall@{self.recall_cutoff}", "mar", "mrr", "ndcg",
                "users", "skipped_users", "dropped_users", "dropped_items"]
        buf.write("\t".join(cols) + "\n")
        for f in self.folds:
            row = [self.model_kind, str(f.step)] + [repr(f.metrics[k]) for k in METRIC_NAMES] + [
                str(f.n_users), str(f.skipped_users), str(f.dropped_users), str(f.dropped_items)]
            buf.write("\t".join(row) + "\n")
        mean = self.mean
        row = [self.model_kind, "mean"] + [repr(mean[k]) for k in METRIC_NAMES] + [
            str(self.n_users), str(sum(f.skipped_users for f in self.folds)),
            str(sum(f.dropped_users for f in self.folds)),
            str(sum(f.dropped_items for f in self.folds))]
        buf.write("\t".join(row) + "\n")
        return buf.getvalue()


def training_tensor(train: InteractionTensor, model_kind: str) -> InteractionTensor:
    if model_kind == "dPF":
        return train
    if model_kind == "PF-all":
        return collapse_steps(train)
    if model_kind == "PF-last":
        return collapse_steps(train.select(train.steps == train.n_steps - 1))
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")


class NoTestUsers(ValueError):
    pass


def evaluate_fold(tensor: InteractionTensor, hp: Hyperparams, config: FitConfig,
                  model_kind: str, eval_step: int, recall_cutoff: int = 50,
                  extrapolate: bool = True) -> FoldResult:
    split = rolling_split(tensor, eval_step)
    train = split.train
    fit_data = training_tensor(train, model_kind)
    if fit_data.nnz == 0:
        raise NoTestUsers(f"step {eval_step}: no training observations for {model_kind}")

    history = {}
    for n, m in zip(train.users.tolist(), train.items.tolist()):
        history.setdefault(n, set()).add(m)
    test = {}
    for n, m in zip(split.test.users.tolist(), split.test.items.tolist()):
        test.setdefault(n, set()).add(m)
    repeats = sum(len(items & history.get(n, set())) for n, items in test.items())
    test = {n: sorted(items - history.get(n, set())) for n, items in test.items()}
    users = sorted(n for n, items in test.items() if items)
    skipped = len(test) - len(users)
    if not users:
        raise NoTestUsers(f"step {eval_step}: no test user has a new item")

    result = fit(fit_data, hp, config)
    scores = log_score_matrix(result.state, hp, fit_data.n_steps, users=np.array(users),
                          extrapolate=extrapolate)
    warm = np.zeros(tensor.n_items, dtype=bool)
    warm[train.items] = True
    ranks = []
    for row, n in enumerate(users):
        cand = warm.copy()
        cand[list(history[n])] = False
        ranking = rank_scores(scores[row], np.flatnonzero(cand))
        pos = np.empty(tensor.n_items, dtype=np.int64)
        pos[ranking] = np.arange(1, len(ranking) + 1)
        ranks.append(pos[test[n]])
    return FoldResult(
        step=eval_step, metrics=all_metrics(ranks, recall_cutoff), n_users=len(users),
        skipped_users=skipped, dropped_users=split.dropped_users,
        dropped_items=split.dropped_items, dropped_entries=split.dropped_entries,
        repeat_entries=repeats,
    )


def evaluate_rolling(tensor: InteractionTensor, hp: Hyperparams, config: FitConfig,
                     model_kind: str, eval_steps, recall_cutoff: int = 50,
                     extrapolate: bool = True, fold_threads: int = 1) -> MetricReport:
    """Fit and score one fold per evaluation step and average the metrics."""
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")
    steps = list(eval_steps)

    def one(step):
        try:
            return evaluate_fold(tensor, hp, config, model_kind, step, recall_cutoff,
                                 extrapolate)
        except NoTestUsers as exc:
            logger.warning("skipping fold: %s", exc)
            return None

    if fold_threads > 1:
        with ThreadPoolExecutor(fold_threads) as pool:
            folds = list(pool.map(one, steps))
    else:
        folds = [one(s) for s in steps]
    folds = [f for f in folds if f is not None]
    if not folds:
        raise ValueError("no valid evaluation folds")
    meta = {
        "model": model_kind + ("" if model_kind == "dPF" else
                               " (dPF restricted to one static step)"),
        "ndcg": "unnormalized, base-2 log",
        "mar": "per-user sum of ranks (not normalized per user)",
        "scoring": "one-step extrapolation" if extrapolate else "last fitted step",
        "K": str(hp.K),
    }
    return MetricReport(model_kind, folds, recall_cutoff, meta)

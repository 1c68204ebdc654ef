"""Plain-TSV exports of fitted factors for external plotting.

All tables carry a header line and write floats with ``repr`` so reading
them back gives the exact float64 values stored in the checkpoint.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint

ENTITY_KINDS = ("user", "item")
TRAJECTORY_HEADER = ("entity_kind", "entity_id", "factor", "step", "expression")
GLOBAL_HEADER = ("entity_kind", "entity_id", "factor", "expression")


def _select(ckpt: Checkpoint, users: Iterable[str] | None, items: Iterable[str] | None):
    """Resolve ids to (kind, id, index) triples sorted by kind then id.

    ``None`` for both selects every entity; ``None`` for just one of them
    selects none of that kind.
    """
    if users is None and items is None:
        users, items = ckpt.user_ids, ckpt.item_ids
    out = []
    for uid in sorted(set(users or ())):
        out.append(("user", uid, ckpt.user_index(uid)))
    for iid in sorted(set(items or ())):
        out.append(("item", iid, ckpt.item_index(iid)))
    return out


def _write(path, header: Sequence[str], rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read(path, header: Sequence[str]):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        got = next(reader, None)
        if tuple(got or ()) != tuple(header):
            raise ValueError(f"{path}: expected header {list(header)}, got {got}")
        yield from reader


def trajectory_rows(ckpt: Checkpoint, users=None, items=None) -> list[tuple]:
    """(kind, id, k, t, posterior mean of dynamic + global expression)."""
    s = ckpt.state
    T, K = ckpt.n_steps, ckpt.hp.K
    rows = []
    for kind, eid, idx in _select(ckpt, users, items):
        if kind == "user":
            expr = s.mu_u[idx] + s.mu_ubar[idx]
        else:
            expr = s.mu_v[idx] + s.mu_vbar[idx]
        for k in range(K):
            for t in range(T):
                rows.append((kind, eid, k, t, float(expr[t, k])))
    return rows


def export_trajectories(ckpt: Checkpoint, path: str | Path, users=None, items=None) -> int:
    rows = trajectory_rows(ckpt, users, items)
    _write(path, TRAJECTORY_HEADER, ((a, b, k, t, repr(v)) for a, b, k, t, v in rows))
    return len(rows)


def read_trajectories(path: str | Path) -> dict[tuple[str, str], np.ndarray]:
    """Map (kind, id) to a ``(T, K)`` array of expression levels."""
    cells: dict[tuple[str, str], dict[tuple[int, int], float]] = {}
    for kind, eid, k, t, value in _read(path, TRAJECTORY_HEADER):
        cells.setdefault((kind, eid), {})[(int(t), int(k))] = float(value)
    out = {}
    for key, vals in cells.items():
        T = 1 + max(t for t, _ in vals)
        K = 1 + max(k for _, k in vals)
        arr = np.full((T, K), np.nan)
        for (t, k), v in vals.items():
            arr[t, k] = v
        out[key] = arr
    return out


def global_rows(ckpt: Checkpoint, users=None, items=None) -> list[tuple]:
    s = ckpt.state
    rows = []
    for kind, eid, idx in _select(ckpt, users, items):
        glob = s.mu_ubar[idx] if kind == "user" else s.mu_vbar[idx]
        rows.extend((kind, eid, k, float(glob[k])) for k in range(ckpt.hp.K))
    return rows


def export_global_factors(ckpt: Checkpoint, path: str | Path, users=None, items=None) -> int:
    rows = global_rows(ckpt, users, items)
    _write(path, GLOBAL_HEADER, ((a, b, k, repr(v)) for a, b, k, v in rows))
    return len(rows)


def read_global_factors(path: str | Path) -> dict[tuple[str, str], np.ndarray]:
    cells: dict[tuple[str, str], dict[int, float]] = {}
    for kind, eid, k, value in _read(path, GLOBAL_HEADER):
        cells.setdefault((kind, eid), {})[int(k)] = float(value)
    return {key: np.array([vals[k] for k in range(len(vals))]) for key, vals in cells.items()}


def aggregate_factors(ckpt: Checkpoint, kind: str = "user", scale: str = "exp",
                      normalize: bool = False) -> np.ndarray:
    """``(T, K)`` mean over entities of each factor's expression per step.

    ``scale="exp"`` averages the posterior mean of ``exp(dynamic + global)``;
    ``scale="raw"`` averages the log-space means.  ``normalize`` divides each
    step by its total over factors, removing overall growth in activity.
    """
    if kind not in ENTITY_KINDS:
        raise ValueError(f"kind must be one of {ENTITY_KINDS}")
    s = ckpt.state
    if scale == "exp":
        if kind == "user":
            log_m = s.user_log_moment() + s.ubar_log_moment()[:, None, :]
        else:
            log_m = s.item_log_moment() + s.vbar_log_moment()[:, None, :]
        agg = np.exp(log_m).mean(axis=0)
    elif scale == "raw":
        if normalize:
            raise ValueError("normalization needs positive values; use scale='exp'")
        agg = (s.user_expression() if kind == "user" else s.item_expression()).mean(axis=0)
    else:
        raise ValueError("scale must be 'exp' or 'raw'")
    if normalize:
        agg = agg / agg.sum(axis=1, keepdims=True)
    return agg


def export_aggregate_factors(ckpt: Checkpoint, path: str | Path, normalize: bool = False,
                             kind: str = "user", scale: str = "exp") -> np.ndarray:
    agg = aggregate_factors(ckpt, kind, scale, normalize)
    header = ["step"] + [f"factor_{k}" for k in range(agg.shape[1])]
    _write(path, header, ([t] + [repr(float(v)) for v in row] for t, row in enumerate(agg)))
    return agg


def read_aggregate(path: str | Path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        return np.array([[float(v) for v in line.rstrip("\n").split("\t")[1:]]
                         for line in fh if line.strip()])

"""Interaction events, time bucketing and sparse user x item x step tensors."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TENSOR_MAGIC = "dpf-tensor"
TENSOR_VERSION = 1


class DataFormatError(ValueError):
    """Raised on malformed input files."""


@dataclass(frozen=True)
class RawEvent:
    user_id: str
    item_id: str
    timestamp: int
    count: int = 1

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"negative count {self.count} for ({self.user_id}, {self.item_id})")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class TimeBucketing:
    origin: int
    granularity: int

    def __post_init__(self):
        if self.granularity <= 0:
            raise ValueError("granularity must be positive")

    def step_index(self, timestamp: int) -> int:
        if timestamp < self.origin:
            raise ValueError(f"timestamp {timestamp} precedes bucketing origin {self.origin}")
        return (timestamp - self.origin) // self.granularity


@dataclass
class InteractionTensor:
    """Sparse counts over (user, item, step).

    Entries are stored as parallel arrays sorted by (step, user, item) with
    no duplicate keys. ``user_ids``/``item_ids`` map dense indices back to
    the original identifiers.
    """

    n_users: int
    n_items: int
    n_steps: int
    users: np.ndarray
    items: np.ndarray
    steps: np.ndarray
    counts: np.ndarray
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.n_steps < 1:
            raise ValueError("tensor dimensions must be positive")
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.steps) == len(self.counts)):
            raise ValueError("entry arrays must have equal length")
        if not self.user_ids:
            self.user_ids = [str(i) for i in range(self.n_users)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(self.n_items)]
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise ValueError("id maps must match tensor dimensions")
        self._canonicalize()

    def _canonicalize(self):
        if self.nnz == 0:
            return
        for arr, bound, name in ((self.users, self.n_users, "user"),
                                 (self.items, self.n_items, "item"),
                                 (self.steps, self.n_steps, "step")):
            if arr.min() < 0 or arr.max() >= bound:
                raise ValueError(f"{name} index out of range [0, {bound})")
        if self.counts.min() < 1:
            raise ValueError("stored counts must be >= 1")
        key = (self.steps * self.n_users + self.users) * self.n_items + self.items
        order = np.argsort(key, kind="stable")
        key = key[order]
        uniq, start = np.unique(key, return_index=True)
        counts = np.add.reduceat(self.counts[order], start) if len(uniq) else self.counts
        first = order[start]
        self.users = self.users[first]
        self.items = self.items[first]
        self.steps = self.steps[first]
        self.counts = counts.astype(np.int64)

    @property
    def nnz(self) -> int:
        return len(self.counts)

    @property
    def step_offsets(self) -> np.ndarray:
        """``offsets[t]:offsets[t+1]`` slices the entries of step ``t``."""
        return np.searchsorted(self.steps, np.arange(self.n_steps + 1))

    @property
    def nnz_per_step(self) -> np.ndarray:
        return np.bincount(self.steps, minlength=self.n_steps)

    def step_slice(self, t: int) -> slice:
        off = self.step_offsets
        return slice(int(off[t]), int(off[t + 1]))

    def with_entries(self, users, items, steps, counts, n_steps=None) -> "InteractionTensor":
        """New tensor over the same id space with different entries."""
        return InteractionTensor(
            self.n_users, self.n_items, self.n_steps if n_steps is None else n_steps,
            users, items, steps, counts, list(self.user_ids), list(self.item_ids),
        )

    def select(self, mask: np.ndarray, n_steps=None) -> "InteractionTensor":
        return self.with_entries(self.users[mask], self.items[mask], self.steps[mask],
                                 self.counts[mask], n_steps=n_steps)

    def transpose(self) -> "InteractionTensor":
        """Swap the roles of users and items."""
        return InteractionTensor(
            self.n_items, self.n_users, self.n_steps, self.items, self.users, self.steps,
            self.counts, list(self.item_ids), list(self.user_ids),
        )

    def dense(self) -> np.ndarray:
        """Dense ``(N, M, T)`` count array; only for small tensors."""
        out = np.zeros((self.n_users, self.n_items, self.n_steps), dtype=np.int64)
        out[self.users, self.items, self.steps] = self.counts
        return out

    def user_index(self, user_id: str) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise KeyError(f"unknown user id {user_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self.item_ids.index(item_id)
        except ValueError:
            raise KeyError(f"unknown item id {item_id!r}") from None


def read_events_tsv(path: str | Path) -> list[RawEvent]:
    """Parse ``user_id \\t item_id \\t timestamp [\\t count]`` lines.

    A first line whose timestamp column is not an integer is taken as a header.
    Blank lines are skipped; anything else malformed raises
    :class:`DataFormatError` carrying the line number.
    """
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DataFormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
            try:
                ts = int(parts[2])
                count = int(parts[3]) if len(parts) == 4 else 1
            except ValueError:
                if lineno == 1 and not events:
                    continue
                raise DataFormatError(f"{path}:{lineno}: timestamp and count must be integers") from None
            try:
                events.append(RawEvent(parts[0], parts[1], ts, count))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return events


def write_events_tsv(events: Iterable[RawEvent], path: str | Path, header: bool = True):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write("user_id\titem_id\ttimestamp\tcount\n")
        for ev in events:
            fh.write(f"{ev.user_id}\t{ev.item_id}\t{ev.timestamp}\t{ev.count}\n")


def bucket_events(events: Sequence[RawEvent], bucketing: TimeBucketing) -> InteractionTensor:
    """Aggregate events into a tensor of per-step counts.

    Ids are indexed in order of first appearance. The number of steps is the
    largest occupied step plus one, so empty interior steps are kept.
    Zero-count events register their ids but add no entry.
    """
    if not events:
        raise ValueError("no events to bucket")
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    users, items, steps, counts = [], [], [], []
    max_step = 0
    for ev in events:
        step = bucketing.step_index(ev.timestamp)
        n = user_map.setdefault(ev.user_id, len(user_map))
        m = item_map.setdefault(ev.item_id, len(item_map))
        max_step = max(max_step, step)
        if ev.count > 0:
            users.append(n)
            items.append(m)
            steps.append(step)
            counts.append(ev.count)
    return InteractionTensor(len(user_map), len(item_map), max_step + 1,
                             users, items, steps, counts, list(user_map), list(item_map))


def binarize(tensor: InteractionTensor) -> InteractionTensor:
    return tensor.with_entries(tensor.users, tensor.items, tensor.steps,
                               np.ones_like(tensor.counts))


@dataclass
class Split:
    train: InteractionTensor
    test: InteractionTensor
    dropped_users: int
    dropped_items: int
    dropped_entries: int


def rolling_split(tensor: InteractionTensor, eval_step: int) -> Split:
    """Train on every step before ``eval_step``, test on ``eval_step``.

    Test entries whose user or item never occurs in the training steps are
    dropped and counted. Repeats of training pairs stay in the test set.
    The id space (N, M) is shared by both halves.
    """
    if not 1 <= eval_step < tensor.n_steps:
        raise ValueError(f"eval_step {eval_step} outside [1, {tensor.n_steps})")
    train = tensor.select(tensor.steps < eval_step, n_steps=eval_step)
    at_step = tensor.steps == eval_step
    warm_users = np.zeros(tensor.n_users, dtype=bool)
    warm_users[train.users] = True
    warm_items = np.zeros(tensor.n_items, dtype=bool)
    warm_items[train.items] = True
    tu, ti = tensor.users[at_step], tensor.items[at_step]
    keep = warm_users[tu] & warm_items[ti]
    test = tensor.with_entries(tu[keep], ti[keep], np.zeros(keep.sum(), dtype=np.int64),
                               tensor.counts[at_step][keep], n_steps=1)
    return Split(
        train=train,
        test=test,
        dropped_users=len(np.setdiff1d(np.unique(tu), np.flatnonzero(warm_users))),
        dropped_items=len(np.setdiff1d(np.unique(ti), np.flatnonzero(warm_items))),
        dropped_entries=int((~keep).sum()),
    )


def collapse_steps(tensor: InteractionTensor) -> InteractionTensor:
    """Sum all steps into a single one (static view of the data)."""
    return tensor.with_entries(tensor.users, tensor.items, np.zeros_like(tensor.steps),
                               tensor.counts, n_steps=1)


def _check_id(value: str):
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValueError(f"id {value!r} contains a tab or newline")


def dumps_tensor(tensor: InteractionTensor) -> str:
    """Plain-text serialization.

    Layout (tab separated, one record per line)::

        dpf-tensor  1
        N  M  T  nnz
        u  <user id>        (N lines, index order)
        i  <item id>        (M lines, index order)
        n  m  t  count      (nnz lines)
    """
    buf = io.StringIO()
    buf.write(f"{TENSOR_MAGIC}\t{TENSOR_VERSION}\n")
    buf.write(f"{tensor.n_users}\t{tensor.n_items}\t{tensor.n_steps}\t{tensor.nnz}\n")
    for uid in tensor.user_ids:
        _check_id(uid)
        buf.write(f"u\t{uid}\n")
    for iid in tensor.item_ids:
        _check_id(iid)
        buf.write(f"i\t{iid}\n")
    for row in zip(tensor.users.tolist(), tensor.items.tolist(),
                   tensor.steps.tolist(), tensor.counts.tolist()):
        buf.write("%d\t%d\t%d\t%d\n" % row)
    return buf.getvalue()


def loads_tensor(text: str) -> InteractionTensor:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        magic, version = lines[0].split("\t")
        if magic != TENSOR_MAGIC:
            raise DataFormatError(f"line 1: not a tensor file (magic {magic!r})")
        if int(version) != TENSOR_VERSION:
            raise DataFormatError(f"line 1: unsupported tensor version {version}")
        n, m, t, nnz = (int(x) for x in lines[1].split("\t"))
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"malformed tensor header: {exc}") from None
    expected = 2 + n + m + nnz
    if len(lines) != expected:
        raise DataFormatError(f"expected {expected} lines, found {len(lines)}")
    user_ids, item_ids = [], []
    for lineno in range(2, 2 + n + m):
        tag, _, ident = lines[lineno].partition("\t")
        want = "u" if lineno < 2 + n else "i"
        if tag != want:
            raise DataFormatError(f"line {lineno + 1}: expected {want!r} record")
        (user_ids if want == "u" else item_ids).append(ident)
    body = lines[2 + n + m:]
    if nnz:
        try:
            entries = np.array([[int(x) for x in row.split("\t")] for row in body], dtype=np.int64)
        except ValueError:
            raise DataFormatError("malformed entry line") from None
        if entries.shape != (nnz, 4):
            raise DataFormatError("entry lines must have 4 fields")
    else:
        entries = np.zeros((0, 4), dtype=np.int64)
    return InteractionTensor(n, m, t, entries[:, 0], entries[:, 1], entries[:, 2], entries[:, 3],
                             user_ids, item_ids)


def save_tensor(tensor: InteractionTensor, path: str | Path):
    Path(path).write_text(dumps_tensor(tensor), encoding="utf-8")


def load_tensor(path: str | Path) -> InteractionTensor:
    return loads_tensor(Path(path).read_text(encoding="utf-8"))


def load_interactions(path: str | Path, granularity: int | None = None,
                      origin: int | None = None, binary: bool = True) -> InteractionTensor:
    """Load either a serialized tensor or a raw event TSV."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith(TENSOR_MAGIC + "\t"):
        tensor = load_tensor(path)
    else:
        events = read_events_tsv(path)
        if not events:
            raise DataFormatError(f"{path}: no events")
        if origin is None:
            origin = min(ev.timestamp for ev in events)
        tensor = bucket_events(events, TimeBucketing(origin, granularity or 1))
    return binarize(tensor) if binary else tensor


def step_timestamp(step: int, granularity: int, origin: int = 0) -> int:
    return origin + step * granularity


__all__ = [
    "DataFormatError", "RawEvent", "TimeBucketing", "InteractionTensor", "Split",
    "read_events_tsv", "write_events_tsv", "bucket_events", "binarize", "rolling_split",
    "collapse_steps", "dumps_tensor", "loads_tensor", "save_tensor", "load_tensor",
    "load_interactions", "step_timestamp",
]

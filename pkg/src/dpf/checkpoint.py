"""Versioned checkpoint of a fitted model.

Layout::

    dpf-checkpoint <version>\\n
    <header: one line of JSON, keys sorted>\\n
    <raw little-endian float64 arrays, in header["arrays"] order>

The header holds hyperparameters, dimensions, id maps, the ELBO trace and
free-form string metadata.  Floats go through ``repr`` and arrays are
written verbatim, so write -> read -> write reproduces the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import VariationalState
from .model import Hyperparams

MAGIC = b"dpf-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    hp: Hyperparams
    state: VariationalState
    user_ids: list[str]
    item_ids: list[str]
    elbo_trace: list[float] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.state.shape[2]

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


def dumps(ckpt: Checkpoint) -> bytes:
    N, M, T, K = ckpt.state.shape
    if len(ckpt.user_ids) != N or len(ckpt.item_ids) != M:
        raise CheckpointError("id maps do not match the variational state")
    if K != ckpt.hp.K:
        raise CheckpointError("state K does not match hyperparameters")
    header = {
        "arrays": [[name, list(getattr(ckpt.state, name).shape)]
                   for name in VariationalState.ARRAYS],
        "dims": {"N": N, "M": M, "T": T, "K": K},
        "elbo_trace": [float(v) for v in ckpt.elbo_trace],
        "hyperparams": ckpt.hp.to_dict(),
        "item_ids": list(ckpt.item_ids),
        "metadata": {str(k): str(v) for k, v in ckpt.metadata.items()},
        "user_ids": list(ckpt.user_ids),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True,
                      allow_nan=False)
    parts = [MAGIC + b" " + str(VERSION).encode() + b"\n", head.encode("ascii") + b"\n"]
    for name in VariationalState.ARRAYS:
        arr = np.ascontiguousarray(getattr(ckpt.state, name), dtype="<f8")
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> Checkpoint:
    try:
        first, rest = blob.split(b"\n", 1)
        magic, version = first.split(b" ")
        head, body = rest.split(b"\n", 1)
    except ValueError:
        raise CheckpointError("truncated or malformed checkpoint") from None
    if magic != MAGIC:
        raise CheckpointError("not a dpf checkpoint")
    if int(version) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {int(version)}")
    header = json.loads(head.decode("ascii"))
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(body):
            raise CheckpointError(f"checkpoint truncated inside array {name}")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError("trailing bytes after arrays")
    state = VariationalState(**{name: arrays[name] for name in VariationalState.ARRAYS})
    return Checkpoint(
        hp=Hyperparams.from_dict(header["hyperparams"]),
        state=state,
        user_ids=list(header["user_ids"]),
        item_ids=list(header["item_ids"]),
        elbo_trace=[float(v) for v in header["elbo_trace"]],
        metadata=dict(header["metadata"]),
    )


def write_checkpoint(ckpt: Checkpoint, path: str | Path):
    Path(path).write_bytes(dumps(ckpt))


def read_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())

"""Versioned checkpoint container with a self-describing byte layout.

Layout: magic line, 8-byte little-endian header length, JSON header
(sorted keys), then one flat blob of C-order array bytes in header
order. The header records every array's name/shape/dtype plus a sha256
of the blob, so a checkpoint can be validated and reconstructed without
trusting anything but the file itself. Identical state serializes to
identical bytes, which the run manifests rely on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajdiff.errors import DataError
from trajdiff.schedules import NoiseSchedule
from trajdiff.utils import write_bytes_atomic

MAGIC = b"TRAJDIFF-CKPT-v1\n"
FORMAT_VERSION = 1


def flatten_tree(tree, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Deterministic (name, array) pairs: dict keys sorted, list order kept."""
    out: list[tuple[str, np.ndarray]] = []
    if isinstance(tree, dict):
        for key in sorted(tree):
            out.extend(flatten_tree(tree[key], f"{prefix}{key}/"))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            out.extend(flatten_tree(item, f"{prefix}{i}/"))
    else:
        out.append((prefix.rstrip("/"), np.asarray(tree)))
    return out


def unflatten_tree(pairs: dict[str, np.ndarray]):
    """Inverse of :func:`flatten_tree`; numeric path components become lists."""

    def insert(node: dict, parts: list[str], value):
        head = parts[0]
        if len(parts) == 1:
            node[head] = value
        else:
            node.setdefault(head, {})
            insert(node[head], parts[1:], value)

    root: dict = {}
    for name, value in pairs.items():
        insert(root, name.split("/"), value)

    def materialize(node):
        if not isinstance(node, dict):
            return node
        if node and all(k.isdigit() for k in node):
            return [materialize(node[str(i)]) for i in range(len(node))]
        return {k: materialize(v) for k, v in node.items()}

    return materialize(root)


@dataclass
class Checkpoint:
    """Full training state: parameters, optimizer moments, and bookkeeping."""

    params: dict
    moments: dict  # {"m": pytree, "v": pytree}
    step: int
    config: dict  # flat config snapshot
    schedule: NoiseSchedule
    best_params: dict | None = None
    best_val: float = float("inf")
    best_step: int = -1
    stale_evals: int = 0
    format_version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        groups = {
            "params": self.params,
            "moments": self.moments,
            "schedule_beta": np.asarray(self.schedule.beta),
        }
        if self.best_params is not None:
            groups["best_params"] = self.best_params
        pairs = flatten_tree(groups)
        blob = b"".join(np.ascontiguousarray(a).tobytes() for _, a in pairs)
        header = {
            "format_version": self.format_version,
            "step": self.step,
            "config": self.config,
            "schedule": {"kind": self.schedule.kind, "T": self.schedule.T},
            "best_val": self.best_val,
            "best_step": self.best_step,
            "stale_evals": self.stale_evals,
            "arrays": [
                {"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in pairs
            ],
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
        }
        head = json.dumps(header, sort_keys=True).encode()
        return MAGIC + len(head).to_bytes(8, "little") + head + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(MAGIC):
            raise DataError("not a trajdiff checkpoint (bad magic)")
        off = len(MAGIC)
        head_len = int.from_bytes(data[off : off + 8], "little")
        off += 8
        header = json.loads(data[off : off + head_len].decode())
        blob = data[off + head_len :]
        digest = hashlib.sha256(blob).hexdigest()
        if digest != header["blob_sha256"]:
            raise DataError("checkpoint integrity hash mismatch")
        pairs: dict[str, np.ndarray] = {}
        pos = 0
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = count * dtype.itemsize
            arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(spec["shape"])
            pairs[spec["name"]] = arr.copy()
            pos += nbytes
        if pos != len(blob):
            raise DataError("checkpoint blob has trailing bytes")
        tree = unflatten_tree(pairs)
        sched = NoiseSchedule(
            kind=header["schedule"]["kind"],
            T=header["schedule"]["T"],
            beta=tree["schedule_beta"],
        )
        return cls(
            params=tree["params"],
            moments=tree["moments"],
            step=header["step"],
            config=header["config"],
            schedule=sched,
            best_params=tree.get("best_params"),
            best_val=header["best_val"],
            best_step=header["best_step"],
            stale_evals=header["stale_evals"],
            format_version=header["format_version"],
        )

    def save(self, path: str | Path) -> None:
        write_bytes_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint file not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def replace(self, **changes) -> "Checkpoint":
        return dataclasses.replace(self, **changes)

"""Versioned binary checkpoints.

Layout (little-endian throughout)::

    b"USR1"                       magic
    u32 format_version
    u32 meta_len, meta_len bytes  JSON metadata (sorted keys, utf-8)
    u32 n_blocks
    n_blocks x:
        u16 name_len, name        utf-8 block name, e.g. "trunk/0.W"
        u8 ndim, ndim x u64       shape
        prod(shape) x f64         values, C order

Serialisation is deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import NET_NAMES, UsrModel

MAGIC = b"USR1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed file or unsupported format version."""


@dataclass
class Checkpoint:
    meta: dict
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(self.blocks))]
        for name, arr in self.blocks.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            key = name.encode()
            parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic bytes)")
        try:
            version, meta_len = struct.unpack_from("<II", data, 4)
            if version != FORMAT_VERSION:
                raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
            pos = 12
            meta = json.loads(data[pos:pos + meta_len].decode())
            pos += meta_len
            (n_blocks,) = struct.unpack_from("<I", data, pos)
            pos += 4
            blocks = {}
            for _ in range(n_blocks):
                name_len, ndim = struct.unpack_from("<HB", data, pos)
                pos += 3
                name = data[pos:pos + name_len].decode()
                pos += name_len
                shape = struct.unpack_from(f"<{ndim}Q", data, pos)
                pos += 8 * ndim
                size = int(np.prod(shape, dtype=np.int64))
                if pos + 8 * size > len(data):
                    raise CheckpointError(f"block {name!r} is truncated")
                blocks[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
                pos += 8 * size
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        if pos != len(data):
            raise CheckpointError("trailing bytes after last block")
        return cls(meta, blocks)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def model_to_checkpoint(model: UsrModel, meta: dict | None = None) -> Checkpoint:
    """Parameters and optimizer moments of ``model`` plus user metadata."""
    full = {
        "obs_dim": model.obs_dim,
        "d": model.d,
        "hidden": model.hidden,
        "ae_hidden": model.ae_hidden,
        "feature_mode": model.feature_mode,
        "model_seed": model.seed,
        "phi_frozen": model.phi_frozen,
    }
    full.update(meta or {})
    blocks = {}
    for name, net in model.nets.items():
        for block, values in net.params.blocks().items():
            blocks[f"{name}/{block}"] = values
    for group, states in model.optim.items():
        for i, st in enumerate(states):
            blocks[f"optim/{group}/{i}/m"] = st.m
            blocks[f"optim/{group}/{i}/v"] = st.v
            blocks[f"optim/{group}/{i}/t"] = np.array([float(st.t)])
    return Checkpoint(full, blocks)


def model_from_checkpoint(ckpt: Checkpoint) -> UsrModel:
    m = ckpt.meta
    try:
        model = UsrModel(m["obs_dim"], m["d"], m["hidden"], m["ae_hidden"], m["model_seed"], m["feature_mode"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc}") from exc
    for name in NET_NAMES:
        net = getattr(model, name)
        for block, values in net.params.blocks().items():
            key = f"{name}/{block}"
            if key not in ckpt.blocks:
                raise CheckpointError(f"checkpoint lacks block {key!r}")
            if ckpt.blocks[key].shape != values.shape:
                raise CheckpointError(f"block {key!r} has shape {ckpt.blocks[key].shape}, expected {values.shape}")
            values[...] = ckpt.blocks[key]
    for group, states in model.optim.items():
        for i, st in enumerate(states):
            prefix = f"optim/{group}/{i}/"
            if prefix + "m" in ckpt.blocks:
                st.m[...] = ckpt.blocks[prefix + "m"]
                st.v[...] = ckpt.blocks[prefix + "v"]
                st.t = int(ckpt.blocks[prefix + "t"][0])
    model.phi_frozen = bool(m["phi_frozen"])
    return model


"""Checkpoint files: a JSON manifest followed by named tensor blocks.

Layout (little-endian)::

    b"DSCK" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
    u32 block count | per block: u32 name length | name | tensor block

Tensor blocks use the ``DSTN`` serialization of :mod:`dualstream.tensor`.
Batch-norm running statistics are stored as ordinary blocks, so a loaded
checkpoint evaluates exactly like the model it was written from.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import StateError
from .model import DualStreamModel, ModelConfig
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"DSCK"
VERSION = 1


def _blocks(model: DualStreamModel) -> list[tuple[str, np.ndarray]]:
    blocks = [(name, p.data) for name, p in model.named_parameters().items()]
    for name, state in model.bn_states().items():
        blocks.append((f"{name}.running_mean", state.running_mean))
        blocks.append((f"{name}.running_var", state.running_var))
    return blocks


def checkpoint_bytes(model: DualStreamModel, meta: dict | None = None) -> bytes:
    manifest = {"model": model.cfg.to_dict(), "d1": model.cfg.d1}
    manifest.update(meta or {})
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    blocks = _blocks(model)
    out.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        encoded = name.encode("utf-8")
        out += [struct.pack("<I", len(encoded)), encoded, tensor_to_bytes(arr)]
    return b"".join(out)


def save_checkpoint(path, model: DualStreamModel, meta: dict | None = None) -> bytes:
    data = checkpoint_bytes(model, meta)
    Path(path).write_bytes(data)
    return data


def parse_checkpoint(data: bytes, expect: ModelConfig | None = None) -> tuple[DualStreamModel, dict]:
    if data[:4] != MAGIC:
        raise StateError("not a checkpoint file")
    version, length = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise StateError(f"unsupported checkpoint version {version}")
    pos = 12
    manifest = json.loads(data[pos : pos + length].decode("utf-8"))
    pos += length
    cfg = ModelConfig(**manifest["model"])
    if expect is not None:
        for key, want in expect.to_dict().items():
            got = cfg.to_dict()[key]
            if got != want:
                raise StateError(f"checkpoint {key} is {got}, configuration expects {want}")
    model = DualStreamModel(cfg)
    params = model.named_parameters()
    bn = model.bn_states()
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4 : pos + 4 + n].decode("utf-8")
        arr, pos = tensor_from_bytes(data, pos + 4 + n)
        seen.add(name)
        if name in params:
            target = params[name].data
        else:
            layer, stat = name.rsplit(".", 1)
            if layer not in bn or stat not in ("running_mean", "running_var"):
                raise StateError(f"unknown checkpoint block {name}")
            target = getattr(bn[layer], stat)
        if target.shape != arr.shape:
            raise StateError(f"block {name} has shape {arr.shape}, model expects {target.shape}")
        target[...] = arr
    missing = {name for name, _ in _blocks(model)} - seen
    if missing:
        raise StateError(f"checkpoint lacks blocks: {sorted(missing)[:5]}")
    return model, manifest


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[DualStreamModel, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StateError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data, expect)

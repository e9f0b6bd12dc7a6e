"""Versioned binary container for checkpoints and plain weight files.

Layout (little-endian)::

    b"RTFQCK1\\0"
    u32 version
    u32 meta_len, meta (UTF-8 JSON)
    u32 tensor_count
    per tensor: u32 name_len, name, u8 dtype, u32 ndim, u32 dims[ndim], raw data
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RTFQCK1\x00"
VERSION = 1

_DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.int32, "<i4"),
    4: (torch.uint8, "u1"),
    5: (torch.bool, "?"),
}
_CODES = {t: code for code, (t, _) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_container(path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {t.dtype}")
        code = _CODES[t.dtype]
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<BI", code, t.dim()),
                  struct.pack(f"<{t.dim()}I", *t.shape), t.numpy().astype(_DTYPES[code][1], copy=False).tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated {what} at offset {self.off}")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_container(path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0 (expected {MAGIC!r})")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset {r.off - 4}")
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}") from None
    tensors = OrderedDict()
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode()
        code, ndim = struct.unpack("<BI", r.take(5, f"header of {name}"))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code} at offset {r.off - 5}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"shape of {name}"))
        dtype, np_dtype = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        data = r.take(count * np.dtype(np_dtype).itemsize, f"data of {name}")
        arr = np.frombuffer(data, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(dtype)
    if r.off != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.off} trailing bytes at offset {r.off}")
    return meta, tensors


def save_plain_checkpoint(path, state: dict[str, torch.Tensor], arch_dict: dict | None = None) -> None:
    save_container(path, {"kind": "plain", "arch": arch_dict}, dict(state))


def load_plain_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    meta, tensors = load_container(path)
    if meta.get("kind") != "plain":
        raise CheckpointError(f"{path}: not a plain weight file (kind={meta.get('kind')!r})")
    return tensors


def _split(tensors, prefix: str) -> "OrderedDict[str, torch.Tensor]":
    n = len(prefix)
    return OrderedDict((k[n:], v) for k, v in tensors.items() if k.startswith(prefix))


def flatten_optimizer(opt: torch.optim.Optimizer) -> tuple[dict, dict[str, torch.Tensor]]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, slot in sd["state"].items():
        for key, val in slot.items():
            if torch.is_tensor(val):
                tensors[f"optim/{idx}/{key}"] = val
            else:
                scalars[f"{idx}/{key}"] = val
    return {"param_groups": sd["param_groups"], "scalars": scalars}, tensors


def restore_optimizer(opt: torch.optim.Optimizer, meta: dict, tensors) -> None:
    state: dict = {}
    for k, v in _split(tensors, "optim/").items():
        idx, key = k.split("/", 1)
        state.setdefault(int(idx), {})[key] = v
    for k, v in meta["scalars"].items():
        idx, key = k.split("/", 1)
        state.setdefault(int(idx), {})[key] = v
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_training(path, meta: dict, student, teacher, optimizer) -> None:
    opt_meta, opt_tensors = flatten_optimizer(optimizer)
    tensors = {}
    tensors.update({f"student/{k}": v for k, v in student.state_dict().items()})
    tensors.update({f"teacher/{k}": v for k, v in teacher.state_dict().items()})
    tensors.update(opt_tensors)
    save_container(path, {"kind": "training", **meta, "optimizer": opt_meta}, tensors)


def load_training(path) -> tuple[dict, "OrderedDict", "OrderedDict", "OrderedDict"]:
    """Returns (meta, student state, teacher state, all tensors)."""
    meta, tensors = load_container(path)
    if meta.get("kind") != "training":
        raise CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    return meta, _split(tensors, "student/"), _split(tensors, "teacher/"), tensors

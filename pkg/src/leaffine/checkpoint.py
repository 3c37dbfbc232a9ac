"""Bit-exact binary checkpoints for models and optimizer state.

Layout (all integers little-endian):

    magic "LFCK" | u32 version = 1 | u64 metadata length
    | UTF-8 JSON metadata (config, class names, group map, phase and
      optimizer info)
    | u32 tensor count
    | per tensor: u16 name length, UTF-8 name, u8 dtype code
      (0 = float32, 1 = float64), u8 rank, rank x u32 dims, raw data

Metadata JSON is serialized with sorted keys and no whitespace, so
save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointFormatError
from .model import Model, ModelConfig
from .optim import OptimizerState

MAGIC = b"LFCK"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _config_dict(config: ModelConfig):
    return {
        "block_kind": config.block_kind,
        "stage_depths": list(config.stage_depths),
        "stage_widths": list(config.stage_widths),
        "stem_width": config.stem_width,
        "num_classes": config.num_classes,
        "image_size": config.image_size,
        "input_channels": config.input_channels,
        "stem_kind": config.stem_kind,
    }


def _config_from_dict(d):
    return ModelConfig(
        block_kind=d["block_kind"],
        stage_depths=tuple(d["stage_depths"]),
        stage_widths=tuple(d["stage_widths"]),
        stem_width=d["stem_width"],
        num_classes=d["num_classes"],
        image_size=d["image_size"],
        input_channels=d["input_channels"],
        stem_kind=d["stem_kind"],
    )


def _optimizer_tensors(model, state):
    if state is None:
        return []
    out = []
    for p in model.parameters():
        if p.name in state.m:
            out.append((f"opt.m.{p.name}", state.m[p.name]))
            out.append((f"opt.v.{p.name}", state.v[p.name]))
    for p in model.parameters():
        if p.name in state.buf:
            out.append((f"opt.b.{p.name}", state.buf[p.name]))
    return out


def save_checkpoint(model: Model, optimizer_state, path, phase_info=None):
    """Write model tensors, buffers and optimizer moments atomically."""
    meta = {
        "config": _config_dict(model.config),
        "class_names": list(model.class_names),
        "num_groups": model.num_groups,
        "groups": model.group_map(),
        "trainable": model.trainable_map(),
        "bn_frozen": {bn.name: bn.stats_frozen for bn in model.bn_units()},
        "optimizer": None if optimizer_state is None else optimizer_state.hyper_dict(),
        "phase": phase_info,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tensors = [(p.name, p.value.data) for p in model.parameters()]
    tensors += [(name, t.data) for name, t in model.named_buffers()]
    tensors += _optimizer_tensors(model, optimizer_state)

    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)),
              meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        name_b = name.encode("utf-8")
        code = _CODES_BY_KIND.get(arr.dtype)
        if code is None:
            raise CheckpointFormatError(f"cannot serialize dtype {arr.dtype} of {name}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())

    blob = b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.blob):
            raise CheckpointFormatError(f"truncated while reading {what}",
                                        offset=self.offset)
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def read_checkpoint(path):
    """Parse a checkpoint into (metadata dict, {name: array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", offset=4)
    meta_len = r.u64("metadata length")
    meta_start = r.offset
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}",
                                    offset=meta_start) from None
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        name_len = r.u16(f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"{name} dtype/rank"))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name}",
                                        offset=r.offset - 2)
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        data = r.take(n_bytes, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if r.offset != len(blob):
        raise CheckpointFormatError("trailing bytes after last tensor", offset=r.offset)
    return meta, tensors


def load_checkpoint(path):
    """Rebuild (model, optimizer_state) from a checkpoint file.

    Every registry tensor must be present; an unrecognized tensor name is
    a format error.
    """
    model, state, _ = load_checkpoint_full(path)
    return model, state


def load_checkpoint_full(path):
    """Like :func:`load_checkpoint` but also returns the metadata dict."""
    meta, tensors = read_checkpoint(path)
    try:
        config = _config_from_dict(meta["config"])
        class_names = list(meta["class_names"])
        num_groups = int(meta["num_groups"])
        groups = meta["groups"]
        trainable = meta["trainable"]
        bn_frozen = meta["bn_frozen"]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"metadata missing field: {exc}") from None

    sample = tensors.get("stem.conv.w")
    dtype = np.float64 if sample is not None and sample.dtype == np.dtype("<f8") else np.float32
    model = Model(config, dtype=dtype)
    model.class_names = class_names
    model.num_groups = num_groups

    for p in model.parameters():
        arr = tensors.pop(p.name, None)
        if arr is None:
            raise CheckpointFormatError(f"missing tensor {p.name}")
        if arr.shape != p.value.shape:
            raise CheckpointFormatError(
                f"tensor {p.name} has shape {arr.shape}, expected {p.value.shape}")
        p.value.data[...] = arr
        p.group = int(groups.get(p.name, 0))
        p.trainable = bool(trainable.get(p.name, True))
    for name, buf in model.named_buffers():
        arr = tensors.pop(name, None)
        if arr is None:
            raise CheckpointFormatError(f"missing buffer {name}")
        buf.data[...] = arr
    for bn in model.bn_units():
        bn.stats_frozen = bool(bn_frozen.get(bn.name, False))

    state = None
    if meta.get("optimizer") is not None:
        state = OptimizerState.from_hyper_dict(meta["optimizer"])
        for name in list(tensors):
            if name.startswith("opt.m."):
                state.m[name[6:]] = tensors.pop(name)
            elif name.startswith("opt.v."):
                state.v[name[6:]] = tensors.pop(name)
            elif name.startswith("opt.b."):
                state.buf[name[6:]] = tensors.pop(name)
    if tensors:
        stray = sorted(tensors)[0]
        raise CheckpointFormatError(f"unknown tensor name {stray!r}")
    return model, state, meta

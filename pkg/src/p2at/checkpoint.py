"""Little-endian binary checkpoints holding every parameter and normalization buffer.

Layout::

    b"P2AT"  u32 version  u32 echo_len  echo (UTF-8 model config)
    u32 entry_count
    entry*:  u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 payload
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError, FormatError
from .model import ModelConfig, P2AT

MAGIC = b"P2AT"
VERSION = 1


def _buffer_slots(model):
    slots = {}

    def walk(module, prefix):
        for key in module._buffers:
            slots[prefix + key] = (module, key)
        for key, child in module._children():
            if hasattr(child, "_buffers"):
                walk(child, f"{prefix}{key}.")

    walk(model, "")
    return slots


def encode_checkpoint(model):
    echo = model.config.echo().encode("utf-8")
    entries = model.state_arrays()
    parts = [MAGIC, struct.pack("<II", VERSION, len(echo)), echo, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.buf):
            have = len(self.buf) - self.pos
            raise FormatError(f"truncated checkpoint in {what}: expected {n} bytes, got {have}", self.pos)
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def u32(self, what, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return vals[0] if count == 1 else vals


def decode_checkpoint(buf):
    """Parse checkpoint bytes into ``(config_echo, {name: float32 array})``."""
    r = _Reader(bytes(buf))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    echo = r.take(r.u32("config echo length"), "config echo").decode("utf-8")
    entries = {}
    for i in range(r.u32("entry count")):
        name = r.take(r.u32(f"entry {i} name length"), f"entry {i} name").decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}", r.pos)
        rank = r.u32(f"entry {name!r} rank")
        dims = r.u32(f"entry {name!r} dims", rank) if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        count = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * count, f"entry {name!r} payload")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last entry", r.pos)
    return echo, entries


def load_checkpoint(path, model):
    """Copy a checkpoint into ``model``; names, shapes and config must agree."""
    with open(path, "rb") as fh:
        echo, entries = decode_checkpoint(fh.read())
    if echo != model.config.echo():
        theirs = dict(line.split(" = ", 1) for line in echo.splitlines() if " = " in line)
        ours = dict(line.split(" = ", 1) for line in model.config.echo().splitlines())
        diff = next((k for k in ours if theirs.get(k) != ours[k]), None) or next(iter(theirs.keys() - ours.keys()), "?")
        raise CheckpointError(f"checkpoint config differs from target model at {diff!r}: {theirs.get(diff)} vs {ours.get(diff)}")
    params = dict(model.named_parameters())
    buffers = _buffer_slots(model)
    expected = list(params) + list(buffers)
    for name in expected:
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing entry {name!r}")
    for name in entries:
        if name not in params and name not in buffers:
            raise CheckpointError(f"checkpoint has unknown entry {name!r}")
    for name in expected:
        target = params[name].data if name in params else buffers[name][0]._buffers[buffers[name][1]]
        if target.shape != entries[name].shape:
            raise CheckpointError(f"entry {name!r} has shape {entries[name].shape}, model expects {target.shape}")
    for name, arr in entries.items():
        if name in params:
            params[name].data = arr.copy()
            params[name].grad = None
            params[name].state = None
        else:
            module, key = buffers[name]
            module._buffers[key] = arr.copy()
    return model


def load_model(path):
    """Rebuild a model from the checkpoint's own config echo, then load it."""
    with open(path, "rb") as fh:
        echo, _ = decode_checkpoint(fh.read())
    model = P2AT(ModelConfig.from_echo(echo))
    return load_checkpoint(path, model)

"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"JHCKPT\\x00\\x01"
    version    u32      FORMAT_VERSION
    meta_len   u32      length of the UTF-8 JSON metadata blob that follows
    meta       bytes
    count      u32      number of entries
    name table count x (u16 length, UTF-8 name)
    entries    count x (u16 name length, name, u8 ndim, ndim x u32 dims,
                        u8 locked flag, prod(dims) x f32 payload)

Entry order is the order given by the caller, so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"JHCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _name_bytes(name: str) -> bytes:
    b = name.encode("utf-8")
    if len(b) > 0xFFFF:
        raise CheckpointError(f"name too long: {name[:40]}...")
    return struct.pack("<H", len(b)) + b


def dumps(entries: list[tuple[str, np.ndarray, bool]], meta: dict | None = None) -> bytes:
    names = [n for n, _, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(entries)))
    for n in names:
        buf.write(_name_bytes(n))
    for name, arr, locked in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(_name_bytes(name))
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", 1 if locked else 0))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, tuple[np.ndarray, bool]], dict]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        table.append(bytes(take(ln)).decode())
    out: dict[str, tuple[np.ndarray, bool]] = {}
    for expected in table:
        (ln,) = struct.unpack("<H", take(2))
        name = bytes(take(ln)).decode()
        if name != expected:
            raise CheckpointError(f"entry {name!r} out of order with name table")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (locked,) = struct.unpack("<B", take(1))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape).astype(np.float32)
        out[name] = (arr, bool(locked))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last entry")
    return out, meta


def save(path, entries, meta: dict | None = None) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(entries, meta))
    os.replace(tmp, path)


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return loads(data)


def module_entries(module, prefix: str = "") -> list[tuple[str, np.ndarray, bool]]:
    return [(prefix + n, p.data, p.locked) for n, p in module.named_parameters()]


def adam_entries(state, prefix: str) -> list[tuple[str, np.ndarray, bool]]:
    out = []
    for name in sorted(state.m):
        out.append((f"{prefix}m/{name}", state.m[name], False))
        out.append((f"{prefix}v/{name}", state.v[name], False))
    return out


def restore_adam(state, entries: dict, prefix: str, step_count: int) -> None:
    state.m.clear()
    state.v.clear()
    for key, (arr, _) in entries.items():
        if key.startswith(prefix + "m/"):
            state.m[key[len(prefix) + 2 :]] = arr
        elif key.startswith(prefix + "v/"):
            state.v[key[len(prefix) + 2 :]] = arr
    state.step_count = step_count


def restore_module(module, entries: dict, prefix: str = "") -> None:
    state = {k[len(prefix) :]: arr for k, (arr, _) in entries.items() if k.startswith(prefix)}
    own = {n for n, _ in module.named_parameters()}
    module.load_state_dict({k: v for k, v in state.items() if k in own})
    for n, p in module.named_parameters():
        p.locked = entries[prefix + n][1]

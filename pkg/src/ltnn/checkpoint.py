"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"LTNN"
    version u32
    cfg_len u32, followed by cfg_len bytes of UTF-8 key=value text
    n_rec   u32
    records, each:
        name_len u16, name bytes (UTF-8)
        dtype    u8   (1 = <f4, 2 = <f8, 3 = <i8)
        ndim     u8
        dims     u32 * ndim
        payload  raw little-endian array data, C order

Writing and reading an array through this container is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LTNN"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, config_text, records):
    """Write named arrays to path. ``records`` is an ordered (name, array) iterable."""
    items = list(records.items()) if isinstance(records, dict) else list(records)
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            arr = np.asarray(arr)
            key = np.dtype(arr.dtype.str.replace(">", "<"))
            if key not in _DTYPE_TAGS:
                raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[key], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=key).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} at offset {fh.tell() - len(buf)}")
    return buf


def read_checkpoint(path):
    """Read a checkpoint; returns (config_text, dict of name -> array)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, cfg_len, "config block").decode("utf-8")
        (n_rec,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records = {}
        for _ in range(n_rec):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "record name length"))
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, "record header"))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "record shape"))
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read_exact(fh, count * dtype.itemsize, f"record {name!r} payload")
            records[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        return config_text, records

"""Binary checkpoint format.

Layout (all integers little-endian):
    magic    4 bytes  b"DDN1"
    version  u32      (currently 1)
    cfglen   u32      followed by cfglen bytes of UTF-8 JSON (ModelConfig)
    ntensors u32
    per tensor:
        namelen u16, name bytes (UTF-8)
        rank    u8,  rank x u32 extents
        data    product(extents) x f32

Tensors cover every trainable parameter plus BN running statistics, in
registry order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import ModelConfig, Network, build, config_from_dict, config_to_dict

MAGIC = b"DDN1"
VERSION = 1


class CheckpointError(Exception):
    """Base for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Corrupt or truncated file, or bad magic."""


class CheckpointVersionError(CheckpointError):
    """Readable file written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Tensor inventory does not match the declared config."""


def _named_tensors(net: Network) -> list[tuple[str, np.ndarray]]:
    out = [(p.name, p.value.data) for p in net.parameters()]
    out.extend(net.buffers())
    return out


def save_checkpoint(net: Network, path: str):
    """Atomic write: serialize to a temp file, then rename into place."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config_to_dict(net.config), sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    tensors = _named_tensors(net)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(chunks)

    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointFormatError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}"
            )
        b = self.blob[self.off : self.off + n]
        self.off += n
        return b

    def u(self, fmt: str) -> int:
        return struct.unpack("<" + fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path: str, dtype=np.float32) -> Network:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    version = r.u("I")
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
    try:
        cfg_dict = json.loads(r.take(r.u("I")).decode())
        config = config_from_dict(cfg_dict)
    except (ValueError, TypeError) as e:
        raise CheckpointFormatError(f"bad config block: {e}") from e

    net = build(config, seed=0, dtype=dtype)
    expected = dict(_named_tensors(net))
    n = r.u("I")
    if n != len(expected):
        raise CheckpointShapeError(
            f"checkpoint holds {n} tensors, config implies {len(expected)}"
        )
    for _ in range(n):
        name = r.take(r.u("H")).decode()
        rank = r.u("B")
        shape = tuple(r.u("I") for _ in range(rank))
        data = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        if name not in expected:
            raise CheckpointShapeError(f"unexpected tensor {name!r}")
        target = expected[name]
        if shape != target.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: stored shape {shape}, config implies {target.shape}"
            )
        target[...] = data.reshape(shape).astype(dtype)
    if r.off != len(blob):
        raise CheckpointFormatError("trailing bytes after tensor table")
    return net

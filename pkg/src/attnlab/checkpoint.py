"""Binary checkpoint container shared by the recognizer and the LSTM LM.

Layout (little endian): magic ``ATTNASR1``, u32 version, u32 length plus
the config text, u32 tensor count, then per tensor a u16 name length, the
UTF-8 name, u8 rank, rank × u32 extents and the float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATTNASR1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config_text: str, tensors: dict) -> bytes:
    """Tensors are written in sorted name order, so the bytes are canonical."""
    text = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[str, dict]:
    def need(n):
        if pos + n > len(blob):
            raise CheckpointError(f"{source}: truncated checkpoint")

    if blob[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    pos = 8
    need(8)
    version, text_len = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    need(text_len)
    text = blob[pos:pos + text_len].decode("utf-8")
    pos += text_len
    need(4)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len + 1)
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        need(4 * size)
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(blob):
        raise CheckpointError(f"{source}: trailing bytes after last tensor")
    return text, tensors


def save_checkpoint(path, config_text: str, tensors: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(config_text, tensors))


def load_checkpoint(path) -> tuple[str, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))

"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MTLCKPT1"
    u32 config length, UTF-8 config text
    per parameter: u32 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload
    u32 CRC32 of every preceding byte
"""

import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint

MAGIC = b"MTLCKPT1"


def encode_checkpoint(config_text, arrays):
    parts = [MAGIC]
    cfg = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob, path=None):
    where = f" in {path}" if path is not None else ""
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CorruptCheckpoint(f"not a checkpoint (bad magic){where}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint(f"CRC mismatch{where}")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CorruptCheckpoint(f"truncated record at byte {pos}{where}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = take(cfg_len).decode("utf-8")
    arrays = OrderedDict()
    while pos < len(body):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        arrays[name] = arr
    return config_text, arrays


def save_checkpoint(path, model, config_text):
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    blob = encode_checkpoint(config_text, model.state_dict())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), path)

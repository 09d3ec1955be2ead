"""SVOL: a minimal little-endian volume container.

Layout::

    6 bytes   magic  b"SVOL1\\0"
    u32       dtype code (0 = f32 image, 1 = u8 labels)
    u32       channel count
    u32       rank
    rank*u32  spatial extents
    rank*f32  spacing
    payload   channel-major, last axis fastest, no compression
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .volumes import LabelVolume, MultiModalVolume

MAGIC = b"SVOL1\x00"
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
_NUMPY = {DTYPE_IMAGE: np.dtype("<f4"), DTYPE_LABELS: np.dtype("u1")}


class SvolError(IOError):
    pass


class BadMagicError(SvolError):
    pass


class TruncatedError(SvolError):
    pass


class DtypeMismatchError(SvolError):
    pass


def encode_svol(value: Union[MultiModalVolume, LabelVolume]) -> bytes:
    if isinstance(value, MultiModalVolume):
        code, arr = DTYPE_IMAGE, value.data
        channels = arr.shape[0]
        spatial = arr.shape[1:]
    elif isinstance(value, LabelVolume):
        code, arr = DTYPE_LABELS, value.labels
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("labels must fit in u8")
        channels, spatial = 1, arr.shape
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")
    rank = len(spatial)
    header = MAGIC + struct.pack(f"<III{rank}I{rank}f", code, channels, rank, *spatial, *value.spacing)
    payload = np.ascontiguousarray(arr, dtype=_NUMPY[code]).tobytes()
    return header + payload


def decode_svol(buf: bytes, expect: str | None = None):
    """Parse SVOL bytes; ``expect`` may be "image" or "labels"."""
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not an SVOL file")
    pos = len(MAGIC)
    if len(buf) < pos + 12:
        raise TruncatedError("truncated header")
    code, channels, rank = struct.unpack_from("<III", buf, pos)
    pos += 12
    if code not in _NUMPY:
        raise DtypeMismatchError(f"unknown dtype code {code}")
    if expect is not None:
        want = {"image": DTYPE_IMAGE, "labels": DTYPE_LABELS}[expect]
        if code != want:
            raise DtypeMismatchError(f"expected {expect} (code {want}), file has dtype code {code}")
    if code == DTYPE_LABELS and channels != 1:
        raise DtypeMismatchError(f"label files carry one channel, header says {channels}")
    if len(buf) < pos + 8 * rank:
        raise TruncatedError("truncated header")
    spatial = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    spacing = struct.unpack_from(f"<{rank}f", buf, pos)
    pos += 4 * rank
    dt = _NUMPY[code]
    need = channels * int(np.prod(spatial)) * dt.itemsize
    have = len(buf) - pos
    if have != need:
        raise TruncatedError(f"truncated payload: header declares {need} bytes, file has {have}")
    arr = np.frombuffer(buf, dtype=dt, offset=pos).copy()
    if code == DTYPE_IMAGE:
        return MultiModalVolume(arr.reshape((channels,) + tuple(spatial)).astype(np.float32), spacing)
    return LabelVolume(arr.reshape(spatial), spacing)


def write_svol(path, value) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    data = encode_svol(value)
    fd, tmp = tempfile.mkstemp(prefix=".svol-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_svol(path, expect: str | None = None):
    with open(path, "rb") as f:
        return decode_svol(f.read(), expect)

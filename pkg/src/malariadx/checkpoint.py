"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PLSM"
    u16   format version
    u32   byte length of the config text, then the UTF-8 config text
    u32   entry count
    per entry:
        u16 name length, UTF-8 name
        u8  dtype code (1 float32, 2 float64, 3 opaque payload)
        u8  rank, then rank x u32 extents
        raw values (codes 1, 2) or u32 length + bytes (code 3)
    u32   CRC-32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    CRCMismatchError,
    MissingParameterError,
    PersistenceError,
    TruncatedCheckpointError,
    UnexpectedParameterError,
    UnknownVersionError,
)
from .model import BUFFER_KINDS, ModelConfig, ModelParams, build_model, param_specs
from .tensor import Tensor

MAGIC = b"PLSM"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
PAYLOAD_CODE = 3

Entry = Union[np.ndarray, bytes]


def encode_container(config_text: str, entries: List[Tuple[str, Entry]]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    text = config_text.encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(entries))
    for name, value in entries:
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        if isinstance(value, (bytes, bytearray)):
            out += struct.pack("<BB", PAYLOAD_CODE, 1) + struct.pack("<I", len(value))
            out += struct.pack("<I", len(value)) + bytes(value)
            continue
        arr = np.asarray(value)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        out += struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError("checkpoint ends unexpectedly")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(buf: bytes) -> Tuple[str, List[Tuple[str, Entry]]]:
    """Inverse of :func:`encode_container`.  Validates magic, CRC and version."""
    if buf[:4] != MAGIC:
        raise BadMagicError("not a PLSM checkpoint (bad magic)")
    if len(buf) < 4 + 2 + 4:
        raise TruncatedCheckpointError("checkpoint too short")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CRCMismatchError("checkpoint CRC-32 does not match contents")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise UnknownVersionError(f"unknown checkpoint format version {version}")
    (text_len,) = r.unpack("<I")
    config_text = r.take(text_len).decode("utf-8")
    (count,) = r.unpack("<I")
    entries: List[Tuple[str, Entry]] = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I")
        if code == PAYLOAD_CODE:
            (size,) = r.unpack("<I")
            entries.append((name, r.take(size)))
            continue
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dt = CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
        entries.append((name, arr))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last entry")
    return config_text, entries


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def read_container(path) -> Tuple[str, List[Tuple[str, Entry]]]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    entries = [(name, params[name].data) for name, _, _ in param_specs(config)]
    write_bytes_atomic(path, encode_container(config.canonical_text(), entries))


def load_checkpoint(path) -> Tuple[ModelParams, ModelConfig]:
    """Read a model checkpoint; raises a :class:`CheckpointError` subclass on any defect."""
    text, entries = read_container(path)
    try:
        config = ModelConfig.from_text(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable model config: {exc}") from exc
    specs = param_specs(config)
    found = dict(entries)
    if len(found) != len(entries):
        raise CheckpointError("duplicate parameter names")
    required = {name: shape for name, shape, _ in specs}
    missing = [n for n in required if n not in found]
    if missing:
        raise MissingParameterError(f"missing parameters: {', '.join(missing)}")
    extra = sorted(set(found) - set(required))
    if extra:
        raise UnexpectedParameterError(f"unexpected parameters: {', '.join(extra)}")
    tensors, buffers = {}, {}
    for name, shape, kind in specs:
        value = found[name]
        if isinstance(value, bytes) or tuple(value.shape) != tuple(shape):
            raise CheckpointError(f"{name}: expected shape {shape}")
        (buffers if kind in BUFFER_KINDS else tensors)[name] = Tensor(value)
    return ModelParams(tensors, buffers), config


def load_for_finetune(path, config: ModelConfig, init_seed: int = 0,
                      dtype=None) -> Tuple[ModelParams, List[str]]:
    """Initialize ``config`` from a checkpoint built for a possibly different config.

    Tensors whose name and shape match are copied; everything else is freshly
    initialized.  Returns the params and the sorted list of names that were
    not taken from the checkpoint.
    """
    _, entries = read_container(path)
    found = {n: v for n, v in entries if not isinstance(v, bytes)}
    if dtype is None:
        dtype = next(iter(found.values())).dtype if found else np.float64
    fresh = build_model(config, init_seed, dtype=dtype)
    tensors, buffers, mismatched = {}, {}, []
    for name, shape, kind in param_specs(config):
        src = found.get(name)
        if src is not None and tuple(src.shape) == tuple(shape):
            t = Tensor(src.astype(dtype))
        else:
            t = fresh[name]
            mismatched.append(name)
        (buffers if kind in BUFFER_KINDS else tensors)[name] = t
    return ModelParams(tensors, buffers), sorted(mismatched)

"""Byte layouts for compressed images (``CWIC``) and model files (``CWMD``).

Both formats are little-endian with unsigned 32-bit counts; the exact tables
live in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autoenc import ModelBundle, bundle_from_config
from .errors import ConfigurationError, CorruptDataError, CorruptModelError

MAGIC = b"CWIC"
VERSION = 1
HEADER = struct.Struct("<4s8I16s2I")
HEADER_SIZE = HEADER.size  # 60
MAX_DIM = 1 << 14
MAX_CHANNELS = 4096
MAX_ALPHABET = 1 << 15

MODEL_MAGIC = b"CWMD"
MODEL_VERSION = 1
DIGEST_SIZE = 16
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class BitstreamHeader:
    height: int  # padded, divisible by 8
    width: int
    orig_height: int
    orig_width: int
    n: int
    L: int
    T: int
    model_id: bytes
    imp_len: int = 0
    code_len: int = 0
    version: int = VERSION

    def validate(self) -> None:
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise CorruptDataError(f"coded size {self.height}x{self.width} is not a positive multiple of 8")
        if max(self.height, self.width) > MAX_DIM:
            raise CorruptDataError(f"coded size {self.height}x{self.width} exceeds {MAX_DIM}")
        if not (0 < self.orig_height <= self.height and 0 < self.orig_width <= self.width):
            raise CorruptDataError("original size outside the coded size")
        if self.height - self.orig_height >= 8 or self.width - self.orig_width >= 8:
            raise CorruptDataError("padding larger than one block")
        if not (1 <= self.n <= MAX_CHANNELS and 1 <= self.L <= MAX_ALPHABET and 2 <= self.T < MAX_ALPHABET):
            raise CorruptDataError(f"implausible n={self.n}, L={self.L}, T={self.T}")
        if self.n % self.L:
            raise CorruptDataError(f"n={self.n} is not a multiple of L={self.L}")
        if len(self.model_id) != DIGEST_SIZE:
            raise CorruptDataError("model id must be 16 bytes")


@dataclass(frozen=True)
class Bitstream:
    header: BitstreamHeader
    importance: bytes
    code: bytes


def write_bitstream(header: BitstreamHeader, importance: bytes, code: bytes) -> bytes:
    header.validate()
    h = header
    raw = HEADER.pack(
        MAGIC, h.version, h.height, h.width, h.orig_height, h.orig_width,
        h.n, h.L, h.T, h.model_id, len(importance), len(code),
    )  # fmt: skip
    return raw + bytes(importance) + bytes(code)


def read_bitstream(data: bytes) -> Bitstream:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CorruptDataError("not a CWIC stream")
    if len(data) < HEADER_SIZE:
        raise CorruptDataError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes")
    magic, version, hh, ww, oh, ow, n, L, T, mid, imp_len, code_len = HEADER.unpack_from(data)
    if version != VERSION:
        raise CorruptDataError(f"unsupported version {version} (this build reads {VERSION})")
    header = BitstreamHeader(hh, ww, oh, ow, n, L, T, mid, imp_len, code_len, version)
    header.validate()
    body = len(data) - HEADER_SIZE
    if body < imp_len + code_len:
        raise CorruptDataError(f"truncated payload: {body} of {imp_len + code_len} bytes")
    if body > imp_len + code_len:
        raise CorruptDataError(f"{body - imp_len - code_len} trailing bytes after the payloads")
    imp = data[HEADER_SIZE : HEADER_SIZE + imp_len]
    code = data[HEADER_SIZE + imp_len :]
    return Bitstream(header, imp, code)


# ---------------------------------------------------------------------------
# Model files


def save_model(bundle: ModelBundle) -> bytes:
    """Serialize every learnt array as float32 plus a JSON config and manifest."""
    manifest = []
    blobs = []
    offset = 0
    for name, a in bundle.named_arrays():
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    meta = json.dumps({"config": bundle.config_dict(), "manifest": manifest}, sort_keys=True).encode()
    body = (
        MODEL_MAGIC + _U32.pack(MODEL_VERSION) + _U32.pack(len(meta)) + meta
        + _U32.pack(offset) + b"".join(blobs)
    )  # fmt: skip
    return body + hashlib.blake2b(body, digest_size=DIGEST_SIZE).digest()


def model_id(bundle: ModelBundle) -> bytes:
    """Content digest of the model as it would be saved."""
    return save_model(bundle)[-DIGEST_SIZE:]


def _read_u32(data: bytes, pos: int) -> tuple[int, int]:
    if pos + 4 > len(data):
        raise CorruptModelError("model file truncated")
    return _U32.unpack_from(data, pos)[0], pos + 4


def load_model(data: bytes) -> tuple[ModelBundle, bytes]:
    """Parse a model file; returns ``(bundle, model_id)``."""
    data = bytes(data)
    if data[:4] != MODEL_MAGIC:
        raise CorruptModelError("not a CWIC model file")
    if len(data) < 16 + DIGEST_SIZE:
        raise CorruptModelError("model file truncated")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.blake2b(body, digest_size=DIGEST_SIZE).digest() != digest:
        raise CorruptModelError("model digest mismatch (file corrupted)")
    version, pos = _read_u32(body, 4)
    if version != MODEL_VERSION:
        raise CorruptModelError(f"unsupported model version {version}")
    meta_len, pos = _read_u32(body, pos)
    try:
        meta = json.loads(body[pos : pos + meta_len])
    except ValueError as exc:
        raise CorruptModelError(f"bad model metadata: {exc}") from exc
    pos += meta_len
    blob_len, pos = _read_u32(body, pos)
    blob = body[pos:]
    if len(blob) != blob_len:
        raise CorruptModelError(f"weight blob is {len(blob)} bytes, header says {blob_len}")
    try:
        bundle = bundle_from_config(meta["config"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise CorruptModelError(f"bad model config: {exc}") from exc
    expected = bundle.named_arrays()
    entries = meta.get("manifest", [])
    if [e.get("name") for e in entries] != [name for name, _ in expected]:
        raise CorruptModelError("manifest does not match the configured architecture")
    end = 0
    for entry, (name, target) in zip(entries, expected):
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise CorruptModelError(f"{name}: shape {shape} != expected {target.shape}")
        size = 4 * int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        if start < end or start + size > blob_len:
            raise CorruptModelError(f"{name}: manifest offset {start} overlaps or runs out of bounds")
        target[...] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=start).reshape(shape)
        end = start + size
    if np.any(bundle.quant.weights < 0):
        raise CorruptModelError("negative quantizer weights")
    return bundle, digest

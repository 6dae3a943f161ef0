"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

import os

import numpy as np

from .errors import InputError


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    out: list[int] = []
    pos = 0
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise InputError("truncated PPM header")
        tok = data[start:pos]
        if not tok.isdigit():
            raise InputError(f"bad PPM header token {tok!r}")
        out.append(int(tok))
    return out, pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Parse P6 bytes into an ``(H, W, 3)`` uint8 array."""
    if data[:2] != b"P6":
        raise InputError("not a binary PPM (P6) file")
    (width, height, maxval), pos = _tokens(data[2:], 3)
    pos += 2 + 1  # single whitespace after maxval
    if maxval != 255:
        raise InputError(f"only 8-bit PPM (maxval 255) is supported, got {maxval}")
    if width < 1 or height < 1:
        raise InputError(f"bad PPM dimensions {width}x{height}")
    need = width * height * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise InputError(f"PPM pixel data truncated: {len(body)} of {need} bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InputError(f"expected (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_ppm(data)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    data = encode_ppm(img)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def to_planes(img: np.ndarray) -> np.ndarray:
    """uint8 ``(H,W,3)`` -> float ``(3,H,W)`` in ``[0, 1]``."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def from_planes(x: np.ndarray) -> np.ndarray:
    """float ``(3,H,W)`` -> uint8 ``(H,W,3)``, clamped and rounded."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0).copy()


def pad_to_multiple(x: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Replicate edge pixels of a ``(C,H,W)`` image up to the next multiple."""
    h, w = x.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if not ph and not pw:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")

"""PMF-driven integer arithmetic coding.

The coder itself is model-agnostic: every symbol is coded under a frequency
table supplied by the caller. :func:`quantize_pmf` turns a real-valued PMF
into such a table (16-bit precision, every symbol at least 1).

The compiled backend (``_rangecoder``) is used when it has been built;
otherwise the pure-Python ``_pyrangecoder`` is imported. Set
``CWIC_PURE_PYTHON=1`` to force the fallback. Both produce identical bytes.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable

import numpy as np

from ..errors import ConfigurationError
from . import _pyrangecoder
from ._pyrangecoder import PRECISION, TOTAL

if os.environ.get("CWIC_PURE_PYTHON"):
    _native = None
else:
    try:
        from . import _rangecoder as _native
    except ImportError:  # extension not built
        _native = None

if _native is not None:
    RangeEncoder = _native.RangeEncoder
    RangeDecoder = _native.RangeDecoder
    BACKEND = "cython"
else:
    RangeEncoder = _pyrangecoder.RangeEncoder
    RangeDecoder = _pyrangecoder.RangeDecoder
    BACKEND = "python"

__all__ = [
    "BACKEND",
    "PRECISION",
    "TOTAL",
    "RangeDecoder",
    "RangeEncoder",
    "backends",
    "decode_symbols",
    "encode_symbols",
    "quantize_pmf",
    "quantize_pmfs",
]


def backends() -> dict[str, tuple[type, type]]:
    """Available ``name -> (encoder, decoder)`` pairs, for tests and benchmarks."""
    out = {"python": (_pyrangecoder.RangeEncoder, _pyrangecoder.RangeDecoder)}
    if _native is not None:
        out["cython"] = (_native.RangeEncoder, _native.RangeDecoder)
    return out


def quantize_pmfs(pmfs: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of each row to ``2**16`` with floor 1.

    ``pmfs`` has shape ``(..., m)``; returns cumulative tables of shape
    ``(..., m + 1)`` as ``uint32`` with ``table[..., 0] == 0`` and
    ``table[..., m] == 2**16``. Ties in the remainders go to the lower index.
    """
    p = np.asarray(pmfs, dtype=np.float64)
    m = p.shape[-1]
    if m > TOTAL:
        raise ConfigurationError(f"alphabet of {m} symbols exceeds the {TOTAL} frequency budget")
    if m < 1:
        raise ConfigurationError("empty alphabet")
    lead = p.shape[:-1]
    p = p.reshape(-1, m)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ConfigurationError("pmf entries must be finite and non-negative")
    sums = p.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ConfigurationError("pmf sums to zero")
    budget = TOTAL - m
    quota = p / sums * budget
    base = np.floor(quota)
    frac = quota - base
    base = base.astype(np.int64)
    extra = budget - base.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(m)[None, :].repeat(len(p), 0), axis=1)
    freq = 1 + base + (rank < extra[:, None])
    cum = np.zeros((len(p), m + 1), dtype=np.uint32)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return cum.reshape(lead + (m + 1,))


def quantize_pmf(pmf) -> np.ndarray:
    """Cumulative frequency table for a single PMF vector."""
    return quantize_pmfs(np.asarray(pmf, dtype=np.float64)[None])[0]


def frequencies(table: np.ndarray) -> np.ndarray:
    return np.diff(np.asarray(table, dtype=np.int64), axis=-1)


def encode_symbols(stream: Iterable[tuple[int, np.ndarray]]) -> bytes:
    """Encode ``(symbol, cumulative_table)`` pairs into a payload."""
    enc = RangeEncoder()
    for symbol, table in stream:
        enc.encode(int(symbol), table)
    return enc.finish()


def decode_symbols(
    payload: bytes,
    count: int,
    provider: Callable[[list[int]], np.ndarray],
    verify: bool = True,
) -> list[int]:
    """Decode ``count`` symbols; ``provider(decoded_so_far)`` yields each table."""
    dec = RangeDecoder(payload, verify)
    out: list[int] = []
    for _ in range(count):
        out.append(int(dec.decode(provider(out))))
    dec.finish()
    return out

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled range coder. Byte-for-byte identical to ``_pyrangecoder``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t
from libc.stdlib cimport malloc, realloc, free

from ..errors import CorruptDataError

cnp.import_array()

DEF PRECISION = 16
DEF TOTAL = 65536
DEF MASK32 = 0xFFFFFFFF
DEF RENORM = 16777216
DEF MAX_PAD = 4

cdef uint64_t TOP = (<uint64_t>1) << 32


cdef inline const uint32_t[::1] _table(object cum):
    if isinstance(cum, np.ndarray) and cum.dtype == np.uint32 and cum.flags.c_contiguous:
        return cum
    return np.ascontiguousarray(cum, dtype=np.uint32)


cdef class RangeEncoder:
    cdef uint64_t low
    cdef uint64_t rng
    cdef uint8_t* buf
    cdef Py_ssize_t size
    cdef Py_ssize_t cap

    def __cinit__(self):
        self.low = 0
        self.rng = MASK32
        self.cap = 256
        self.size = 0
        self.buf = <uint8_t*>malloc(self.cap)
        if self.buf == NULL:
            raise MemoryError()

    def __dealloc__(self):
        if self.buf != NULL:
            free(self.buf)

    cdef inline void _push(self, uint8_t b) except *:
        cdef uint8_t* nb
        if self.size == self.cap:
            nb = <uint8_t*>realloc(self.buf, self.cap * 2)
            if nb == NULL:
                raise MemoryError()
            self.buf = nb
            self.cap *= 2
        self.buf[self.size] = b
        self.size += 1

    cdef inline void _carry(self):
        cdef Py_ssize_t i = self.size - 1
        while self.buf[i] == 0xFF:
            self.buf[i] = 0
            i -= 1
        self.buf[i] += 1

    cdef inline void _encode(self, uint32_t lo, uint32_t freq) except *:
        cdef uint64_t r = self.rng >> PRECISION
        cdef uint64_t low = self.low + r * lo
        cdef uint64_t rng = r * freq
        if low >= TOP:
            low -= TOP
            self._carry()
        while rng < RENORM:
            self._push(<uint8_t>(low >> 24))
            low = (low << 8) & MASK32
            rng <<= 8
        self.low = low
        self.rng = rng

    def encode(self, Py_ssize_t symbol, cum):
        cdef const uint32_t[::1] c = _table(cum)
        if symbol < 0 or symbol + 1 >= c.shape[0]:
            raise ValueError(f"symbol {symbol} outside table of {c.shape[0] - 1} entries")
        self._encode(c[symbol], c[symbol + 1] - c[symbol])

    def encode_many(self, symbols, cums):
        if len(symbols) == 0 and len(cums) == 0:
            return
        cdef const int64_t[::1] s = np.ascontiguousarray(symbols, dtype=np.int64)
        cdef const uint32_t[:, ::1] c = np.ascontiguousarray(cums, dtype=np.uint32)
        cdef Py_ssize_t i, sym, m = c.shape[1] - 1
        if s.shape[0] != c.shape[0]:
            raise ValueError("symbols and tables differ in length")
        for i in range(s.shape[0]):
            sym = s[i]
            if sym < 0 or sym >= m:
                raise ValueError(f"symbol {sym} outside table of {m} entries")
            self._encode(c[i, sym], c[i, sym + 1] - c[i, sym])

    def finish(self):
        cdef uint64_t low = self.low, rng = self.rng, unit = 0, v = 0
        cdef int k
        for k in range(5):
            unit = (<uint64_t>1) << (32 - 8 * k)
            v = ((low + unit - 1) // unit) * unit
            if v < low + rng:
                break
        if v >= TOP:
            v -= TOP
            self._carry()
        for i in range(k):
            self._push(<uint8_t>((v >> (24 - 8 * i)) & 0xFF))
        return bytes((<char*>self.buf)[:self.size])


cdef class RangeDecoder:
    cdef bytes data
    cdef const uint8_t* ptr
    cdef Py_ssize_t n
    cdef Py_ssize_t pos
    cdef int pad
    cdef uint64_t rng
    cdef uint64_t code
    cdef RangeEncoder shadow
    cdef bint verify

    def __init__(self, data, verify=True):
        self.data = bytes(data)
        self.ptr = <const uint8_t*>(<char*>self.data)
        self.n = len(self.data)
        self.pos = 0
        self.pad = 0
        self.rng = MASK32
        self.code = 0
        self.verify = verify
        self.shadow = RangeEncoder() if verify else None
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    cdef inline uint64_t _next(self) except? 0xFFFF:
        if self.pos < self.n:
            self.pos += 1
            return self.ptr[self.pos - 1]
        self.pad += 1
        if self.pad > MAX_PAD:
            raise CorruptDataError("arithmetic payload exhausted before all symbols were decoded")
        return 0

    cdef inline Py_ssize_t _decode(self, const uint32_t* cum, Py_ssize_t m) except -1:
        cdef uint64_t r = self.rng >> PRECISION
        cdef uint64_t target = self.code // r
        cdef Py_ssize_t lo = 0, hi = m - 1, mid
        if target >= TOTAL:
            raise CorruptDataError("arithmetic payload points outside the coding interval")
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if cum[mid] <= target:
                lo = mid
            else:
                hi = mid - 1
        self.code -= r * cum[lo]
        cdef uint64_t rng = r * (cum[lo + 1] - cum[lo])
        while rng < RENORM:
            self.code = (self.code << 8) | self._next()
            rng <<= 8
        self.rng = rng
        if self.shadow is not None:
            self.shadow._encode(cum[lo], cum[lo + 1] - cum[lo])
        return lo

    def decode(self, cum):
        cdef const uint32_t[::1] c = _table(cum)
        return self._decode(&c[0], c.shape[0] - 1)

    def decode_many(self, cums):
        if len(cums) == 0:
            return np.empty(0, dtype=np.int64)
        cdef const uint32_t[:, ::1] c = np.ascontiguousarray(cums, dtype=np.uint32)
        cdef Py_ssize_t i, m = c.shape[1] - 1
        out = np.empty(c.shape[0], dtype=np.int64)
        cdef int64_t[::1] o = out
        for i in range(c.shape[0]):
            o[i] = self._decode(&c[i, 0], m)
        return out

    def finish(self):
        if self.shadow is not None and self.shadow.finish() != self.data:
            raise CorruptDataError("arithmetic payload is not the canonical encoding of its symbols")

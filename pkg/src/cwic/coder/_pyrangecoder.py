"""Pure-Python range coder, the fallback for the compiled ``_rangecoder``.

Both implementations must produce identical bytes; see ``docs/FORMATS.md``
for the payload definition.

Register layout: ``low`` is a 32-bit window onto the code value (carries are
pushed straight into the already-emitted bytes), ``range`` stays in
``[2**24, 2**32)`` between symbols, and frequencies are 16-bit (total 2**16).
"""

from ..errors import CorruptDataError

PRECISION = 16
TOTAL = 1 << PRECISION
MASK32 = 0xFFFFFFFF
TOP = 1 << 32
RENORM = 1 << 24
MAX_PAD = 4


def _carry(out: bytearray) -> None:
    i = len(out) - 1
    while out[i] == 0xFF:
        out[i] = 0
        i -= 1
    out[i] += 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def encode(self, symbol, cum):
        if symbol < 0 or symbol + 1 >= len(cum):
            raise ValueError(f"symbol {symbol} outside table of {len(cum) - 1} entries")
        lo = int(cum[symbol])
        freq = int(cum[symbol + 1]) - lo
        r = self.range >> PRECISION
        low = self.low + r * lo
        rng = r * freq
        if low >= TOP:
            low -= TOP
            _carry(self.out)
        while rng < RENORM:
            self.out.append(low >> 24)
            low = (low << 8) & MASK32
            rng <<= 8
        self.low = low
        self.range = rng

    def encode_many(self, symbols, cums):
        for s, cum in zip(symbols, cums):
            self.encode(int(s), cum)

    def finish(self) -> bytes:
        """Emit the fewest bytes that pin a value inside the final interval."""
        low, rng = self.low, self.range
        for k in range(5):
            unit = 1 << (32 - 8 * k)
            v = -(-low // unit) * unit
            if v < low + rng:
                break
        if v >= TOP:
            v -= TOP
            _carry(self.out)
        for i in range(k):
            self.out.append((v >> (24 - 8 * i)) & 0xFF)
        return bytes(self.out)


class RangeDecoder:
    """Decodes a payload and, on :meth:`finish`, checks it is canonical.

    The check re-encodes the decoded symbols in lockstep; any payload that is
    not byte-identical to that re-encoding raises :class:`CorruptDataError`.
    """

    def __init__(self, data, verify=True):
        self.data = bytes(data)
        self.pos = 0
        self.pad = 0
        self.range = MASK32
        self.code = 0
        self.verify = verify
        self.shadow = RangeEncoder() if verify else None
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.pad += 1
        if self.pad > MAX_PAD:
            raise CorruptDataError("arithmetic payload exhausted before all symbols were decoded")
        return 0

    def decode(self, cum):
        r = self.range >> PRECISION
        target = self.code // r
        if target >= TOTAL:
            raise CorruptDataError("arithmetic payload points outside the coding interval")
        # binary search: largest s with cum[s] <= target
        lo, hi = 0, len(cum) - 2
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if int(cum[mid]) <= target:
                lo = mid
            else:
                hi = mid - 1
        s = lo
        base = int(cum[s])
        self.code -= r * base
        rng = r * (int(cum[s + 1]) - base)
        while rng < RENORM:
            self.code = (self.code << 8) | self._next()
            rng <<= 8
        self.range = rng
        if self.shadow is not None:
            self.shadow.encode(s, cum)
        return s

    def decode_many(self, cums):
        return [self.decode(cum) for cum in cums]

    def finish(self):
        if self.shadow is not None and self.shadow.finish() != self.data:
            raise CorruptDataError("arithmetic payload is not the canonical encoding of its symbols")

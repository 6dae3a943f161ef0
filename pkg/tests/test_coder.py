import math

import numpy as np
import pytest

from cwic import coder
from cwic.errors import ConfigurationError, CorruptDataError

BACKENDS = list(coder.backends().items())
IDS = [name for name, _ in BACKENDS]


def random_stream(rng, count, max_alpha=12):
    m = int(rng.integers(1, max_alpha + 1))
    pmfs = rng.dirichlet(np.full(m, float(rng.choice([0.1, 1.0, 5.0]))), size=count)
    tables = coder.quantize_pmfs(pmfs)
    symbols = np.array([rng.choice(m, p=p / p.sum()) for p in pmfs], dtype=np.int64)
    return symbols, tables


def encode(enc_cls, symbols, tables):
    enc = enc_cls()
    enc.encode_many(symbols, tables)
    return enc.finish()


def decode(dec_cls, payload, tables):
    dec = dec_cls(payload)
    out = dec.decode_many(tables)
    dec.finish()
    return list(out)


class TestQuantizePmf:
    def test_uniform4(self):
        assert coder.frequencies(coder.quantize_pmf([0.25] * 4)).tolist() == [16384] * 4

    def test_floor(self):
        assert coder.frequencies(coder.quantize_pmf([1.0, 0.0])).tolist() == [65535, 1]

    def test_random_sum_and_floor(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = int(rng.integers(1, 300))
            p = rng.dirichlet(np.full(m, 0.3))
            t = coder.quantize_pmf(p)
            f = coder.frequencies(t)
            assert t[0] == 0 and t[-1] == coder.TOTAL and np.all(f >= 1)
            # largest remainder never strays a full unit from the exact quota
            quota = p * (coder.TOTAL - m)
            assert np.all(np.abs((f - 1) - quota) < 1.0 + 1e-9)

    def test_deterministic_and_batched(self):
        p = np.random.default_rng(1).dirichlet(np.ones(7), size=(3, 4))
        t = coder.quantize_pmfs(p)
        assert t.shape == (3, 4, 8)
        assert np.array_equal(t[2, 1], coder.quantize_pmf(p[2, 1]))

    def test_alphabet_too_large(self):
        with pytest.raises(ConfigurationError):
            coder.quantize_pmf(np.ones(coder.TOTAL + 1))

    def test_rejects_negative(self):
        with pytest.raises(ConfigurationError):
            coder.quantize_pmf([0.5, -0.1, 0.6])


@pytest.mark.parametrize("enc_cls,dec_cls", [b for _, b in BACKENDS], ids=IDS)
class TestRoundTrip:
    def test_empty_stream(self, enc_cls, dec_cls):
        payload = encode(enc_cls, [], [])
        assert len(payload) <= 5
        assert decode(dec_cls, payload, []) == []

    def test_uniform4_length(self, enc_cls, dec_cls):
        t = coder.quantize_pmf([0.25] * 4)
        for syms in ([0] * 8, [3] * 8, [0, 1, 2, 3, 3, 2, 1, 0]):
            payload = encode(enc_cls, syms, [t] * 8)
            assert 2 <= len(payload) <= 4
            assert decode(dec_cls, payload, [t] * 8) == syms

    def test_fuzz_10000(self, enc_cls, dec_cls):
        rng = np.random.default_rng(2)
        for trial in range(10_000):
            symbols, tables = random_stream(rng, int(rng.integers(0, 24)))
            payload = encode(enc_cls, symbols, tables)
            assert decode(dec_cls, payload, tables) == symbols.tolist(), trial

    def test_long_skewed_stream(self, enc_cls, dec_cls):
        rng = np.random.default_rng(3)
        tables = coder.quantize_pmfs(np.tile([0.999, 0.0005, 0.0005], (5000, 1)))
        symbols = (rng.random(5000) < 0.01).astype(np.int64)
        payload = encode(enc_cls, symbols, tables)
        assert decode(dec_cls, payload, tables) == symbols.tolist()

    def test_length_bound(self, enc_cls, dec_cls):
        rng = np.random.default_rng(4)
        for _ in range(300):
            symbols, tables = random_stream(rng, int(rng.integers(0, 400)))
            f = coder.frequencies(tables)
            ideal = sum(-math.log2(f[i, s] / coder.TOTAL) for i, s in enumerate(symbols))
            assert 8 * len(encode(enc_cls, symbols, tables)) <= ideal + 64

    def test_exhausted_payload(self, enc_cls, dec_cls):
        t = coder.quantize_pmf([0.25] * 4)
        dec = dec_cls(encode(enc_cls, [], []))
        with pytest.raises(CorruptDataError):
            for _ in range(100):
                dec.decode(t)

    def test_mutation_never_silent(self, enc_cls, dec_cls):
        rng = np.random.default_rng(5)
        for _ in range(500):
            symbols, tables = random_stream(rng, int(rng.integers(1, 40)))
            payload = bytearray(encode(enc_cls, symbols, tables))
            if not payload:
                continue
            payload[int(rng.integers(len(payload)))] ^= 1 << int(rng.integers(8))
            try:
                out = decode(dec_cls, bytes(payload), tables)
            except CorruptDataError:
                continue
            assert out != symbols.tolist()

    def test_bad_symbol(self, enc_cls, dec_cls):
        with pytest.raises(ValueError):
            enc_cls().encode(4, coder.quantize_pmf([0.25] * 4))


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
class TestBackendsAgree:
    def test_identical_bytes(self):
        (_, (pe, pd)), (_, (ce, cd)) = BACKENDS
        rng = np.random.default_rng(6)
        for _ in range(500):
            symbols, tables = random_stream(rng, int(rng.integers(0, 200)), max_alpha=40)
            a = encode(pe, symbols, tables)
            assert encode(ce, symbols, tables) == a
            assert decode(cd, a, tables) == decode(pd, a, tables) == symbols.tolist()

    def test_selected_backend_is_compiled(self):
        assert coder.BACKEND == "cython"


class TestCallbackApi:
    def test_provider_sees_history(self):
        # adaptive model: next symbol predicted equal to the previous one
        def table_for(history):
            m = 3
            p = np.full(m, 0.1)
            p[history[-1] if history else 0] = 0.8
            return coder.quantize_pmf(p)

        symbols = [0, 0, 2, 2, 2, 1, 0]
        hist = []
        stream = []
        for s in symbols:
            stream.append((s, table_for(hist)))
            hist.append(s)
        payload = coder.encode_symbols(stream)
        assert coder.decode_symbols(payload, len(symbols), table_for) == symbols

    def test_trailing_garbage_detected(self):
        t = coder.quantize_pmf([0.5, 0.5])
        payload = coder.encode_symbols([(1, t)] * 16)
        with pytest.raises(CorruptDataError):
            coder.decode_symbols(payload + b"\x00\x07", 16, lambda h: t)

import numpy as np
import pytest
from helpers import tiny_bundle

from cwic import codec
from cwic import container as ct
from cwic.entropy import Tcae, TcaeConfig, remap_codes
from cwic.errors import ConfigurationError, CorruptDataError, ModelMismatchError


def random_tcae(n, m, order, rng):
    model = Tcae(TcaeConfig(n, m, 2, order, kernel=3, resblocks=1), rng)
    for _, p in model.named_parameters():
        p.value[...] += rng.normal(scale=0.3, size=p.value.shape)
    return model


class TestCuboid:
    @pytest.mark.parametrize("order", ["raster", "inclined"])
    def test_round_trip(self, order):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, h, w, m = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 6)
            model = random_tcae(int(n), int(m), order, rng)
            c = rng.integers(0, m, size=(n, h, w))
            payload = codec.encode_cuboid(c, model)
            assert np.array_equal(codec.decode_cuboid(payload, model, c.shape), c)

    def test_masked_positions_not_coded(self):
        rng = np.random.default_rng(1)
        model = random_tcae(3, 4, "inclined", rng)
        c = rng.integers(1, 4, size=(3, 4, 4))
        mask = rng.integers(0, 2, size=c.shape)
        stored = c * mask
        payload = codec.encode_cuboid(stored, model, mask)
        assert np.array_equal(codec.decode_cuboid(payload, model, c.shape, mask), stored)
        # an all-zero mask costs only the flush
        assert len(codec.encode_cuboid(stored, model, np.zeros_like(mask))) == 0

    @pytest.mark.parametrize("degree", [1, 2, 3, None])
    def test_degree_invariance(self, degree):
        rng = np.random.default_rng(2)
        model = random_tcae(2, 3, "inclined", rng)
        c = rng.integers(0, 3, size=(2, 3, 4))
        payload = codec.encode_cuboid(c, model)
        assert np.array_equal(codec.decode_cuboid(payload, model, c.shape, degree=degree), c)

    def test_bad_degree(self):
        model = random_tcae(1, 2, "inclined", np.random.default_rng(3))
        with pytest.raises(ConfigurationError):
            codec.decode_cuboid(b"", model, (1, 1, 1), degree=0)

    def test_symbol_outside_alphabet(self):
        model = random_tcae(1, 2, "raster", np.random.default_rng(4))
        with pytest.raises(ConfigurationError):
            codec.encode_cuboid(np.full((1, 2, 2), 2), model)


class TestImage:
    def test_round_trip_transports_z(self):
        b = tiny_bundle(activation="relu", T=4, L=2)
        mid = ct.model_id(b)
        x = np.random.default_rng(5).random((3, 24, 16))
        enc = codec.encode_image(b, x, mid=mid)
        dec = codec.decode_image(b, enc.data, mid=mid)
        assert np.array_equal(dec.qi, enc.qi)
        assert np.array_equal(dec.o_prime, enc.o_prime)
        assert np.array_equal(dec.z, enc.z)
        assert dec.image.shape == x.shape
        assert dec.image.min() >= 0.0 and dec.image.max() <= 1.0

    def test_decoded_image_is_decoder_of_z(self):
        b = tiny_bundle(activation="relu")
        x = np.random.default_rng(6).random((3, 16, 16))
        enc = codec.encode_image(b, x)
        dec = codec.decode_image(b, enc.data)
        assert np.array_equal(dec.image, np.clip(b.net.decoder_forward(enc.z), 0, 1))

    def test_deterministic_bytes(self):
        b = tiny_bundle()
        x = np.random.default_rng(7).random((3, 16, 16))
        assert codec.encode_image(b, x).data == codec.encode_image(b, x.copy()).data

    def test_bpp_is_file_bits_over_pixels(self):
        b = tiny_bundle()
        enc = codec.encode_image(b, np.random.default_rng(8).random((3, 16, 24)))
        assert enc.bpp == 8 * len(enc.data) / (16 * 24)
        assert enc.sum_m == int(enc.mask.sum())

    def test_auto_pad(self):
        b = tiny_bundle()
        x = np.random.default_rng(9).random((3, 13, 10))
        with pytest.raises(ConfigurationError, match="auto-pad"):
            codec.encode_image(b, x)
        enc = codec.encode_image(b, x, auto_pad=True)
        assert (enc.header.height, enc.header.width) == (16, 16)
        assert codec.decode_image(b, enc.data).image.shape == (3, 13, 10)

    def test_model_mismatch(self):
        x = np.random.default_rng(10).random((3, 8, 8))
        data = codec.encode_image(tiny_bundle(seed=0), x).data
        with pytest.raises(ModelMismatchError):
            codec.decode_image(tiny_bundle(seed=1), data)
        with pytest.raises(ModelMismatchError):
            codec.decode_image(tiny_bundle(seed=0, n=8, L=4), data)

    def test_tampered_payload(self):
        b = tiny_bundle()
        data = codec.encode_image(b, np.random.default_rng(11).random((3, 16, 16))).data
        rng = np.random.default_rng(12)
        outcomes = set()
        for _ in range(40):
            bad = bytearray(data)
            bad[int(rng.integers(ct.HEADER_SIZE, len(bad)))] ^= 1 << int(rng.integers(8))
            try:
                codec.decode_image(b, bytes(bad))
                outcomes.add("parsed")
            except CorruptDataError:
                outcomes.add("error")
        assert "error" in outcomes

    def test_codes_nonzero_where_stored(self):
        b = tiny_bundle()
        enc = codec.encode_image(b, np.random.default_rng(13).random((3, 16, 16)))
        assert np.all(enc.o_prime[enc.mask == 1] >= 1) and np.all(enc.o_prime[enc.mask == 0] == 0)
        assert np.array_equal(enc.o_prime, remap_codes(enc.o_prime - (enc.mask == 1), enc.mask))


def test_uniform_bits():
    mask = np.zeros((4, 2, 3))
    mask[:2] = 1
    assert codec.uniform_bits(mask, 3, 2) == pytest.approx(12 * 2.0 + 6 * 1.0)

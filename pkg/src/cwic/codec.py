"""Image <-> bitstream: analysis, entropy coding of ``QI(p)`` and ``o'``, synthesis.

Stream order is importance first: once ``QI(p)`` is known the decoder can
rebuild the mask, which fixes how many code symbols follow and where they go.
Only positions with mask 1 are arithmetic coded in the code stream.

Decoding walks the model's coding steps (inclined planes or single raster
positions). Within a step the stored positions are split into chunks of
``degree`` symbols; each chunk costs one forward pass of the entropy model
over the whole cuboid, so the PMFs never depend on the chunking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coder
from . import importance as imp
from . import quantizer as qz
from .autoenc import STRIDE, ModelBundle, analyse
from .container import BitstreamHeader, model_id, read_bitstream, write_bitstream
from .entropy import Tcae, coding_steps, predict_pmfs, remap_codes, unmap_codes
from .errors import ConfigurationError, CorruptDataError, ModelMismatchError
from .ppm import pad_to_multiple


def _positions(model: Tcae, shape: tuple[int, int, int], mask: np.ndarray | None) -> list[np.ndarray]:
    """Coded positions per step, in stream order (masked-out ones dropped)."""
    steps = coding_steps(model.cfg.order, *shape)
    if mask is None:
        return steps
    return [p[mask[p[:, 0], p[:, 1], p[:, 2]] != 0] for p in steps]


def encode_cuboid(c: np.ndarray, model: Tcae, mask: np.ndarray | None = None) -> bytes:
    """Arithmetic-code the stored symbols of an ``(n,h,w)`` cuboid.

    The encoder sees every symbol, so one forward pass gives all PMFs; by
    causality they equal what the decoder will compute step by step.
    """
    c = np.asarray(c, dtype=np.int64)
    if c.max(initial=0) >= model.cfg.alphabet or c.min(initial=0) < 0:
        raise ConfigurationError(f"symbols outside [0, {model.cfg.alphabet})")
    steps = _positions(model, c.shape, mask)
    pos = np.concatenate(steps) if steps else np.zeros((0, 3), dtype=np.int64)
    if len(pos) == 0:
        return coder.RangeEncoder().finish()
    pmfs = predict_pmfs(c, model)
    k, i, j = pos.T
    tables = coder.quantize_pmfs(pmfs[k, i, j])
    enc = coder.RangeEncoder()
    enc.encode_many(c[k, i, j], tables)
    return enc.finish()


def decode_cuboid(
    payload: bytes,
    model: Tcae,
    shape: tuple[int, int, int],
    mask: np.ndarray | None = None,
    degree: int | None = None,
) -> np.ndarray:
    """Inverse of :func:`encode_cuboid`. ``degree=None`` decodes a whole step per pass."""
    if degree is not None and degree < 1:
        raise ConfigurationError("parallelism degree must be at least 1")
    c = np.zeros(shape, dtype=np.int64)
    dec = coder.RangeDecoder(payload, True)
    for pos in _positions(model, shape, mask):
        size = len(pos) if degree is None else degree
        for s in range(0, len(pos), max(size, 1)):
            chunk = pos[s : s + size]
            k, i, j = chunk.T
            tables = coder.quantize_pmfs(predict_pmfs(c, model)[k, i, j])
            c[k, i, j] = dec.decode_many(tables)
    dec.finish()
    return c


@dataclass
class EncodedImage:
    data: bytes
    header: BitstreamHeader
    qi: np.ndarray  # (h, w)
    o_prime: np.ndarray  # (n, h, w)
    mask: np.ndarray
    z: np.ndarray

    @property
    def bits(self) -> int:
        return 8 * len(self.data)

    @property
    def bpp(self) -> float:
        return self.bits / (self.header.orig_height * self.header.orig_width)

    @property
    def sum_m(self) -> int:
        return int(self.mask.sum())


@dataclass
class DecodedImage:
    image: np.ndarray  # (3, orig_h, orig_w), clamped to [0, 1]
    header: BitstreamHeader
    qi: np.ndarray
    o_prime: np.ndarray
    mask: np.ndarray
    z: np.ndarray


def encode_codes(bundle: ModelBundle, qi: np.ndarray, o_prime: np.ndarray, mask: np.ndarray) -> tuple[bytes, bytes]:
    """Importance payload and code payload for one image."""
    imp_payload = encode_cuboid(np.asarray(qi)[None], bundle.tcae_imp)
    code_payload = encode_cuboid(o_prime, bundle.tcae_code, mask)
    return imp_payload, code_payload


def decode_codes(
    bundle: ModelBundle, imp_payload: bytes, code_payload: bytes, h: int, w: int, degree: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(qi, o_prime, mask)`` from the two payloads."""
    qi = decode_cuboid(imp_payload, bundle.tcae_imp, (1, h, w), None, degree)[0]
    mask = imp.build_mask(qi, bundle.n, bundle.L)
    o_prime = decode_cuboid(code_payload, bundle.tcae_code, (bundle.n, h, w), mask, degree)
    if np.any((o_prime == 0) & (mask == 1)):
        raise CorruptDataError("reserved symbol 0 at a stored code position")
    return qi, o_prime, mask


def encode_image(
    bundle: ModelBundle, x: np.ndarray, auto_pad: bool = False, mid: bytes | None = None
) -> EncodedImage:
    """Compress a ``(3,H,W)`` image in ``[0,1]``.

    ``mid`` is the model digest; it is recomputed from the weights when omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ConfigurationError(f"expected a (3,H,W) image, got shape {x.shape}")
    oh, ow = x.shape[1:]
    if oh % STRIDE or ow % STRIDE:
        if not auto_pad:
            raise ConfigurationError(
                f"image {oh}x{ow} is not divisible by {STRIDE}; pad it or pass --auto-pad"
            )
        x = pad_to_multiple(x, STRIDE)
    a = analyse(bundle, x)
    qi = a.qi[0]
    o_prime = remap_codes(a.levels, a.mask)
    imp_payload, code_payload = encode_codes(bundle, qi, o_prime, a.mask)
    header = BitstreamHeader(
        x.shape[1], x.shape[2], oh, ow, bundle.n, bundle.L, bundle.T,
        mid if mid is not None else model_id(bundle), len(imp_payload), len(code_payload),
    )  # fmt: skip
    data = write_bitstream(header, imp_payload, code_payload)
    return EncodedImage(data, header, qi, o_prime, a.mask, a.z)


def check_model(header: BitstreamHeader, bundle: ModelBundle, mid: bytes | None = None) -> None:
    if (header.n, header.L, header.T) != (bundle.n, bundle.L, bundle.T):
        raise ModelMismatchError(
            f"stream has n={header.n}, L={header.L}, T={header.T}; "
            f"model has n={bundle.n}, L={bundle.L}, T={bundle.T}"
        )
    mid = mid if mid is not None else model_id(bundle)
    if header.model_id != mid:
        raise ModelMismatchError(
            f"stream was encoded with model {header.model_id.hex()}, this model is {mid.hex()}"
        )


def decode_image(
    bundle: ModelBundle, data: bytes, degree: int | None = None, mid: bytes | None = None
) -> DecodedImage:
    stream = read_bitstream(data)
    header = stream.header
    check_model(header, bundle, mid)
    h, w = header.height // STRIDE, header.width // STRIDE
    qi, o_prime, mask = decode_codes(bundle, stream.importance, stream.code, h, w, degree)
    z = qz.dequantize(unmap_codes(o_prime), mask, bundle.quant)
    xhat = bundle.net.decoder_forward(z)
    img = np.clip(xhat[:, : header.orig_height, : header.orig_width], 0.0, 1.0)
    return DecodedImage(img, header, qi, o_prime, mask, z)


def uniform_bits(mask: np.ndarray, T: int, L: int) -> float:
    """Bits for the stored symbols under uniform PMFs over each model's alphabet."""
    h, w = mask.shape[-2:]
    return float(mask.sum() * np.log2(T + 1) + h * w * np.log2(L))

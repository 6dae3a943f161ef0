"""Trimmed convolutional context model over 3D symbol cuboids.

A cuboid of shape ``(n, h, w)`` is treated as an ``n``-channel image. A
*group* of feature maps is another ``(n, h, w)`` cuboid, so a layer with
``g_in`` input and ``g_out`` output groups is an ordinary convolution with
``g_in * n`` input and ``g_out * n`` output channels (group-major channel
index ``g * n + k``) whose kernel is multiplied by a binary trim mask.

Two coding orders are supported:

* ``raster``: channel-major, then rows, then columns.
* ``inclined``: planes ``k + i + j = t`` in increasing ``t``. Every symbol of
  a plane depends only on earlier planes, so a whole plane can be predicted
  from one forward pass.

The mask for input layers excludes the tap of the symbol being predicted;
hidden-layer masks keep it (that feature only carries context).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    Activation,
    Conv2d,
    Module,
    OptimizerState,
    PlateauSchedule,
    Residual,
    Sequential,
    adam_step,
    conv2d_forward,
)

PROB_FLOOR = 2.0**-16
ORDERS = ("raster", "inclined")
KINDS = ("input", "hidden")


@dataclass
class TrimMask:
    array: np.ndarray  # (out_ch, in_ch, kh, kw) of {0, 1}
    layer_kind: str
    order_kind: str

    def tile(self, g_out: int, g_in: int) -> np.ndarray:
        return np.tile(self.array, (g_out, g_in, 1, 1))


def _offsets(kh: int, kw: int) -> tuple[np.ndarray, np.ndarray]:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"trim masks need odd kernel sizes, got {kh}x{kw}")
    i = np.arange(kh)[:, None] - kh // 2
    j = np.arange(kw)[None, :] - kw // 2
    return i, j


def _check_kind(layer_kind: str) -> None:
    if layer_kind not in KINDS:
        raise ConfigurationError(f"layer kind must be one of {KINDS}, got {layer_kind!r}")


def build_raster_mask(layer_kind: str, out_ch: int, in_ch: int, kh: int, kw: int) -> TrimMask:
    """Mask for raster order; ``[t, k]`` pairs output plane ``t`` with input plane ``k``."""
    _check_kind(layer_kind)
    i, j = _offsets(kh, kw)
    centre_ok = (j <= 0) if layer_kind == "hidden" else (j < 0)
    same = (i < 0) | ((i == 0) & centre_ok)
    t = np.arange(out_ch)[:, None, None, None]
    k = np.arange(in_ch)[None, :, None, None]
    m = (k < t) | ((k == t) & same[None, None])
    return TrimMask(m.astype(np.float64), layer_kind, "raster")


def build_inclined_mask(layer_kind: str, out_ch: int, in_ch: int, kh: int, kw: int) -> TrimMask:
    """Mask for inclined order, using the channel offset ``delta = k_in - t_out``."""
    _check_kind(layer_kind)
    i, j = _offsets(kh, kw)
    delta = np.arange(in_ch)[None, :, None, None] - np.arange(out_ch)[:, None, None, None]
    s = delta + i[None, None] + j[None, None]
    m = (s <= 0) if layer_kind == "hidden" else (s < 0)
    return TrimMask(m.astype(np.float64), layer_kind, "inclined")


def build_mask(order_kind: str, layer_kind: str, out_ch: int, in_ch: int, kh: int, kw: int) -> TrimMask:
    if order_kind == "raster":
        return build_raster_mask(layer_kind, out_ch, in_ch, kh, kw)
    if order_kind == "inclined":
        return build_inclined_mask(layer_kind, out_ch, in_ch, kh, kw)
    raise ConfigurationError(f"order must be one of {ORDERS}, got {order_kind!r}")


def trimmed_conv_forward(
    inputs: list[np.ndarray],
    kernels: np.ndarray,
    mask: TrimMask,
    bias: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Multi-group trimmed convolution.

    ``inputs`` is a list of ``g_in`` cuboids, each ``(n,h,w)`` (or batched
    ``(N,n,h,w)``); ``kernels`` has shape ``(g_out*n, g_in*n, kh, kw)``.
    Output group ``g'`` is ``sum_g inputs[g] * (mask o w[g', g])``.
    """
    if not inputs:
        raise ConfigurationError("trimmed conv needs at least one input group")
    shape = inputs[0].shape
    if any(x.shape != shape for x in inputs):
        raise ConfigurationError("all input groups must share the cuboid dimensions")
    n = shape[-3]
    out_total, in_total, kh, kw = kernels.shape
    g_in = len(inputs)
    if in_total != g_in * n or out_total % n:
        raise ConfigurationError(
            f"kernel shape {kernels.shape} incompatible with {g_in} groups of {n} channels"
        )
    g_out = out_total // n
    if mask.array.shape != (n, n, kh, kw):
        raise ConfigurationError(f"mask shape {mask.array.shape} != {(n, n, kh, kw)}")
    w = kernels * mask.tile(g_out, g_in)
    x = np.concatenate(inputs, axis=-3)
    b = np.zeros(out_total) if bias is None else bias
    y = conv2d_forward(x, w, b, 1, kh // 2)
    return [y[..., g * n : (g + 1) * n, :, :] for g in range(g_out)]


# ---------------------------------------------------------------------------
# Coding schedules


def raster_order(n: int, h: int, w: int) -> np.ndarray:
    """Positions ``(k, i, j)`` with ``j`` fastest, then ``i``, then ``k``."""
    if min(n, h, w) < 1:
        raise ConfigurationError(f"cuboid dims must be positive, got {(n, h, w)}")
    k, i, j = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([k.ravel(), i.ravel(), j.ravel()], axis=1)


def inclined_planes(n: int, h: int, w: int) -> list[np.ndarray]:
    """Plane ``t`` holds every ``(k,i,j)`` with ``k+i+j == t``, ordered by ``(k, i)``."""
    pos = raster_order(n, h, w)
    t = pos.sum(axis=1)
    return [pos[t == s] for s in range(n + h + w - 2)]


def coding_steps(order_kind: str, n: int, h: int, w: int) -> list[np.ndarray]:
    """Groups of positions that can be predicted from a single forward pass."""
    if order_kind == "inclined":
        return inclined_planes(n, h, w)
    if order_kind == "raster":
        return [p[None] for p in raster_order(n, h, w)]
    raise ConfigurationError(f"order must be one of {ORDERS}, got {order_kind!r}")


def remap_codes(o: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``o' = (o + 1) * m``: symbol 0 is reserved for masked-out positions."""
    return ((np.asarray(o, dtype=np.int64) + 1) * np.asarray(mask, dtype=np.int64)).astype(np.int64)


def unmap_codes(o_prime: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(o_prime, dtype=np.int64) - 1, 0)


# ---------------------------------------------------------------------------
# Model


@dataclass
class TcaeConfig:
    channels: int  # cuboid depth n
    alphabet: int  # m
    groups: int = 8
    order: str = "inclined"
    kernel: int = 5
    resblocks: int = 3

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ConfigurationError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.alphabet < 2 or self.channels < 1 or self.groups < 1:
            raise ConfigurationError(f"invalid TCAE config {self}")
        if self.kernel % 2 == 0:
            raise ConfigurationError("TCAE kernel size must be odd")


class Tcae(Module):
    """Stack of trimmed convolutions ending in a softmax over ``alphabet`` groups.

    Layout: input trimmed conv, hidden trimmed conv, ``resblocks`` residual
    blocks of two hidden trimmed convs, and a final hidden trimmed conv with
    one output group per symbol value.
    """

    def __init__(self, cfg: TcaeConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        n, g, k = cfg.channels, cfg.groups, cfg.kernel
        m_in = build_mask(cfg.order, "input", n, n, k, k)
        m_hid = build_mask(cfg.order, "hidden", n, n, k, k)
        self.mask_input, self.mask_hidden = m_in, m_hid

        def trimmed(g_in: int, g_out: int, mask: TrimMask, scale: float | None = None) -> Conv2d:
            return Conv2d(g_in * n, g_out * n, k, rng=rng, mask=mask.tile(g_out, g_in), scale=scale)

        layers: list[Module] = [trimmed(1, g, m_in), Activation("relu"), trimmed(g, g, m_hid)]
        for _ in range(cfg.resblocks):
            body = Sequential(
                Activation("relu"), trimmed(g, g, m_hid), Activation("relu"), trimmed(g, g, m_hid, scale=0.01)
            )
            layers.append(Residual(body))
        layers += [Activation("relu"), trimmed(g, cfg.alphabet, m_hid, scale=0.01)]
        self.children["net"] = Sequential(*layers)

    def embed(self, c: np.ndarray) -> np.ndarray:
        return np.asarray(c, dtype=np.float64) / (self.cfg.alphabet - 1)

    def logits(self, c: np.ndarray) -> np.ndarray:
        """``(N,n,h,w)`` symbols -> ``(N,m,n,h,w)`` logits."""
        c = np.asarray(c)
        squeeze = c.ndim == 3
        if squeeze:
            c = c[None]
        if c.shape[1] != self.cfg.channels:
            raise ConfigurationError(f"cuboid depth {c.shape[1]} != model channels {self.cfg.channels}")
        y = self.children["net"].forward(self.embed(c))
        nb, _, h, w = y.shape
        y = y.reshape(nb, self.cfg.alphabet, self.cfg.channels, h, w)
        return y[0] if squeeze else y

    def backward_logits(self, grad: np.ndarray) -> None:
        nb, m, n, h, w = grad.shape
        self.children["net"].backward(grad.reshape(nb, m * n, h, w))


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def floor_pmf(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=axis, keepdims=True)


def predict_pmfs(c: np.ndarray, model: Tcae) -> np.ndarray:
    """PMFs for every position from one forward pass.

    ``(n,h,w)`` symbols give ``(n,h,w,m)``; a batch ``(N,n,h,w)`` gives
    ``(N,n,h,w,m)``. Each vector is floored at ``2**-16`` and renormalized.
    """
    logits = model.logits(c)
    axis = 0 if logits.ndim == 4 else 1
    p = floor_pmf(softmax(logits, axis=axis), axis=axis)
    return np.moveaxis(p, axis, -1)


def entropy_objective(pmfs: np.ndarray, c: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Code length in bits: ``sum -m * log2 P(c)``; masked-out positions cost nothing."""
    c = np.asarray(c, dtype=np.int64)
    sel = np.take_along_axis(pmfs, c[..., None], axis=-1)[..., 0]
    sel = np.maximum(sel, PROB_FLOOR)
    bits = -np.log2(sel)
    if mask is not None:
        bits = bits * np.asarray(mask)
    return float(bits.sum())


# ---------------------------------------------------------------------------
# Training

TCAE_RATES = (3e-4, 1e-4, 3.33e-5, 1.11e-5)


@dataclass
class TcaeTrainConfig:
    steps: int = 1000
    batch_size: int = 16
    rates: tuple[float, ...] = TCAE_RATES
    patience: int = 5
    seed: int = 0


@dataclass
class TcaeHistory:
    step: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    bits_per_symbol: list[float] = field(default_factory=list)


def objective_grad(model: Tcae, c: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Forward+backward on a batch; returns ``(total_bits, stored_symbols)``.

    The gradient is that of the mean bits per stored symbol under the
    unfloored softmax (the floor only matters for tiny probabilities).
    """
    logits = model.logits(c)
    p = softmax(logits, axis=1)
    mask = np.asarray(mask, dtype=np.float64)
    count = max(1.0, float(mask.sum()))
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, c[:, None].astype(np.int64), 1.0, axis=1)
    pf = floor_pmf(p, axis=1)
    sel = np.take_along_axis(pf, c[:, None].astype(np.int64), axis=1)[:, 0]
    bits = float(np.sum(-np.log2(sel) * mask))
    grad = (p - onehot) * mask[:, None] / (np.log(2.0) * count)
    model.backward_logits(grad)
    return bits, count


def evaluate_bits(model: Tcae, cuboids: np.ndarray, masks: np.ndarray, batch_size: int = 64) -> float:
    """Mean bits per stored symbol of the model's (floored) PMFs."""
    total = 0.0
    count = 0.0
    for s in range(0, len(cuboids), batch_size):
        c = cuboids[s : s + batch_size]
        m = masks[s : s + batch_size]
        total += entropy_objective(predict_pmfs(c, model), c, m)
        count += float(np.sum(m))
    return total / max(count, 1.0)


def train_entropy_model(
    model: Tcae,
    cuboids: np.ndarray,
    masks: np.ndarray | None = None,
    cfg: TcaeTrainConfig | None = None,
    log=None,
) -> TcaeHistory:
    """ADAM on the masked code length with plateau-driven learning-rate drops.

    ``cuboids`` is ``(num, n, h, w)``; ``masks`` the matching importance masks
    (all ones when omitted). An epoch is one pass over the corpus; the rate
    drops to the next value after ``patience`` epochs without improvement.
    """
    cfg = cfg or TcaeTrainConfig()
    cuboids = np.asarray(cuboids, dtype=np.int64)
    if masks is None:
        masks = np.ones_like(cuboids, dtype=np.uint8)
    if cuboids.max(initial=0) >= model.cfg.alphabet or cuboids.min(initial=0) < 0:
        raise ConfigurationError("cuboid symbols outside the model alphabet")
    rng = np.random.default_rng(cfg.seed)
    schedule = PlateauSchedule(cfg.rates, cfg.patience)
    state = OptimizerState(lr=schedule.lr)
    history = TcaeHistory()
    named = dict(model.named_parameters())
    num = len(cuboids)
    bs = min(cfg.batch_size, num)
    order = rng.permutation(num)
    cursor = 0
    epoch_bits = epoch_count = 0.0
    for step in range(cfg.steps):
        if cursor + bs > num:
            schedule.update(epoch_bits / max(epoch_count, 1.0))
            epoch_bits = epoch_count = 0.0
            order = rng.permutation(num)
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        model.zero_grad()
        bits, count = objective_grad(model, cuboids[idx], masks[idx])
        epoch_bits += bits
        epoch_count += count
        state.lr = schedule.lr
        adam_step({k: p.value for k, p in named.items()}, {k: p.grad for k, p in named.items()}, state)
        history.step.append(step)
        history.lr.append(state.lr)
        history.bits_per_symbol.append(bits / count)
        if log is not None:
            log(step, state.lr, bits / count)
    return history

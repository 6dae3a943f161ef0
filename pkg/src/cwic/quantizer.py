"""Learnt channel-wise multi-valued quantization.

Each of the ``n`` code channels owns ``T`` non-negative interval weights; the
quantization centers are their running sums, so centers are non-decreasing
by construction. Forward quantization snaps to the nearest center (lower
level wins exact ties); the backward pass is the identity (straight-through).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, CorruptDataError

WINDOW = 50


@dataclass
class QuantizerParams:
    weights: np.ndarray  # (n, T), all >= 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ConfigurationError(f"quantizer weights must be (n, T>=2), got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ConfigurationError("quantizer interval weights must be non-negative")

    @property
    def num_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def num_levels(self) -> int:
        return self.weights.shape[1]


def init_params(n: int, T: int) -> QuantizerParams:
    """Uniform-prior initialization: first interval 1/(2T), the rest 1/T."""
    if n < 1 or T < 2:
        raise ConfigurationError(f"need n >= 1 and T >= 2, got n={n}, T={T}")
    s = np.full((n, T), 1.0 / T)
    s[:, 0] = 1.0 / (2 * T)
    return QuantizerParams(s)


def centers(params: QuantizerParams) -> np.ndarray:
    return np.cumsum(params.weights, axis=1)


def _channel_axis(e: np.ndarray) -> int:
    return 0 if e.ndim == 3 else 1


def _broadcast_centers(q: np.ndarray, e: np.ndarray) -> np.ndarray:
    # q: (n, T) -> shape broadcastable against e[..., None]
    if e.ndim == 3:
        return q[:, None, None, :]
    return q[None, :, None, None, :]


def quantize(e: np.ndarray, params: QuantizerParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(levels, values)`` for a ``(n,h,w)`` or ``(N,n,h,w)`` feature map."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[_channel_axis(e)] != params.num_channels:
        raise ConfigurationError(
            f"feature map has {e.shape[_channel_axis(e)]} channels, quantizer has {params.num_channels}"
        )
    q = centers(params)
    qb = _broadcast_centers(q, e)
    dist = (e[..., None] - qb) ** 2
    levels = np.argmin(dist, axis=-1)  # first minimum -> lower level on ties
    values = np.take_along_axis(np.broadcast_to(qb, dist.shape), levels[..., None], axis=-1)[..., 0]
    return levels.astype(np.int64), values


def dequantize(levels: np.ndarray, mask: np.ndarray, params: QuantizerParams) -> np.ndarray:
    """``z = q[k, level]`` where the mask is set, 0 elsewhere."""
    levels = np.asarray(levels)
    mask = np.asarray(mask)
    if levels.shape != mask.shape:
        raise ConfigurationError(f"levels shape {levels.shape} != mask shape {mask.shape}")
    T = params.num_levels
    live = mask.astype(bool)
    if np.any(live & ((levels < 0) | (levels >= T))):
        raise CorruptDataError(f"quantization level outside [0, {T})")
    q = centers(params)
    safe = np.where(live, levels, 0)
    if levels.ndim == 3:
        k = np.arange(params.num_channels)[:, None, None]
    else:
        k = np.arange(params.num_channels)[None, :, None, None]
    return np.where(live, q[k, safe], 0.0)


def quantization_loss(e: np.ndarray, params: QuantizerParams) -> float:
    """Mean squared quantization error over all elements."""
    _, values = quantize(e, params)
    return float(np.mean((values - e) ** 2))


def quantization_loss_grad(e: np.ndarray, params: QuantizerParams) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the interval weights (levels held fixed)."""
    levels, values = quantize(e, params)
    n, T = params.weights.shape
    diff = values - e
    total = diff.size
    chan = np.broadcast_to(
        np.arange(n)[:, None, None] if e.ndim == 3 else np.arange(n)[None, :, None, None], levels.shape
    )
    dq = np.zeros((n, T))
    np.add.at(dq, (chan.ravel(), levels.ravel()), 2.0 * diff.ravel() / total)
    # q_t = sum_{t'<=t} s_t'  =>  dL/ds_t' = sum_{t>=t'} dL/dq_t
    ds = np.cumsum(dq[:, ::-1], axis=1)[:, ::-1]
    return float(np.mean(diff**2)), ds


def straight_through_grad(upstream: np.ndarray) -> np.ndarray:
    """Backward of the linear proxy used in place of the quantizer: identity."""
    return upstream


def project_nonnegative(params: QuantizerParams) -> None:
    np.maximum(params.weights, 0.0, out=params.weights)


def level_histogram(levels: np.ndarray, T: int) -> np.ndarray:
    """Per-channel counts of assigned levels, shape ``(n, T)``."""
    if levels.ndim == 3:
        levels = levels[None]
    n = levels.shape[1]
    flat = levels.transpose(1, 0, 2, 3).reshape(n, -1)
    return np.stack([np.bincount(row, minlength=T)[:T] for row in flat])


@dataclass
class LevelHistogramWindow:
    """Rolling per-channel level histograms of the most recent mini-batches."""

    num_channels: int
    num_levels: int
    length: int = WINDOW
    batches: deque = field(default_factory=deque)
    # mini-batches observed per channel since its last reset
    age: np.ndarray | None = None

    def __post_init__(self):
        self.batches = deque(self.batches, maxlen=self.length)
        if self.age is None:
            self.age = np.zeros(self.num_channels, dtype=np.int64)

    def push(self, hist: np.ndarray) -> None:
        hist = np.asarray(hist, dtype=np.int64)
        if hist.shape != (self.num_channels, self.num_levels):
            raise ConfigurationError(f"histogram shape {hist.shape} != {(self.num_channels, self.num_levels)}")
        self.batches.append(hist.copy())
        self.age += 1

    def totals(self) -> np.ndarray:
        if not self.batches:
            return np.zeros((self.num_channels, self.num_levels), dtype=np.int64)
        return np.sum(np.stack(list(self.batches)), axis=0)

    def reset_channel(self, k: int) -> None:
        self.age[k] = 0
        for h in self.batches:
            h[k] = 0


def dead_threshold(counts: np.ndarray) -> int:
    """Smallest ``t0`` with every level ``>= t0`` unused (``T`` if none)."""
    used = np.nonzero(counts)[0]
    return 0 if used.size == 0 else int(used[-1]) + 1


def monitor_and_reinit(
    params: QuantizerParams, window: LevelHistogramWindow
) -> tuple[QuantizerParams, list[int]]:
    """Redistribute trailing interval weights of channels with dead levels.

    A channel qualifies once it has a full window of mini-batches in which no
    element used a level ``>= t0``. Its weights ``s[t0-1:]`` are all set to
    ``s[t0-1] / (T - t0 + 1)``, which keeps the old centers ``q[0..t0-1]``
    available (``q[t0-1]`` moves to the last slot). Returns the new params and
    the list of channels that were re-initialized.
    """
    s = params.weights.copy()
    T = params.num_levels
    totals = window.totals()
    touched = []
    for k in range(params.num_channels):
        if window.age[k] < window.length:
            continue
        t0 = dead_threshold(totals[k])
        if t0 < 1 or t0 >= T:
            continue
        s[k, t0 - 1 :] = s[k, t0 - 1] / (T - t0 + 1)
        window.reset_channel(k)
        touched.append(k)
    return QuantizerParams(s), touched

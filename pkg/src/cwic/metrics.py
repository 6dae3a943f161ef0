"""Distortion measures on ``(3, H, W)`` images scaled to ``[0, 1]``."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError

PSNR_CAP = 99.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def mse(xhat: np.ndarray, x: np.ndarray) -> float:
    return float(np.mean((np.asarray(xhat, dtype=np.float64) - x) ** 2))


def mse_loss_grad(xhat: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean of per-image MSE and its gradient w.r.t. ``xhat``."""
    d = np.asarray(xhat, dtype=np.float64) - x
    return float(np.mean(d**2)), 2.0 * d / d.size


def psnr(xhat: np.ndarray, x: np.ndarray) -> float:
    """``10 log10(1 / MSE)``, capped at 99 dB for identical images."""
    err = mse(xhat, x)
    if err <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / err)


def _gaussian() -> np.ndarray:
    r = np.arange(WINDOW) - WINDOW // 2
    g = np.exp(-(r**2) / (2 * SIGMA**2))
    return g / g.sum()


def _filter_matrix(size: int) -> np.ndarray:
    """``(size - 10, size)`` banded matrix applying the 1D window in 'valid' mode."""
    g = _gaussian()
    out = np.zeros((size - WINDOW + 1, size))
    for r in range(size - WINDOW + 1):
        out[r, r : r + WINDOW] = g
    return out


def _pool_matrix(size: int) -> np.ndarray:
    """2-tap averaging with stride 2; a trailing odd row/column is dropped."""
    out = np.zeros((size // 2, size))
    for r in range(size // 2):
        out[r, 2 * r : 2 * r + 2] = 0.5
    return out


def _apply(a: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a @ x @ b.T over the trailing two axes
    return np.einsum("rh,...hw,sw->...rs", a, x, b, optimize=True)


def msssim_weights(scales: int) -> np.ndarray:
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ConfigurationError(f"MS-SSIM supports 1..{len(MSSSIM_WEIGHTS)} scales, got {scales}")
    w = np.array(MSSSIM_WEIGHTS[:scales])
    return w / w.sum()


def min_size(scales: int) -> int:
    return 2 ** (scales - 1) * WINDOW


def _check_size(shape: tuple[int, ...], scales: int) -> None:
    need = min_size(scales)
    h, w = shape[-2:]
    if min(h, w) < need:
        fit = max_scales(h, w)
        hint = f"use at most {fit} scales" if fit else f"images must be at least {WINDOW}x{WINDOW}"
        raise ConfigurationError(f"image {h}x{w} too small for {scales}-scale MS-SSIM (needs {need}); {hint}")


def max_scales(h: int, w: int) -> int:
    """Largest scale count the image supports (0 when even one scale does not fit)."""
    fits = [s for s in range(1, len(MSSSIM_WEIGHTS) + 1) if min_size(s) <= min(h, w)]
    return max(fits) if fits else 0


def _forward(x: np.ndarray, y: np.ndarray, scales: int):
    """Per-channel MS-SSIM plus everything the backward pass needs."""
    weights = msssim_weights(scales)
    tape = []
    values = []
    for j in range(scales):
        h, w = x.shape[-2:]
        fa, fb = _filter_matrix(h), _filter_matrix(w)
        mx, my = _apply(fa, x, fb), _apply(fa, y, fb)
        sxx = _apply(fa, x * x, fb) - mx * mx
        syy = _apply(fa, y * y, fb) - my * my
        sxy = _apply(fa, x * y, fb) - mx * my
        d1 = mx * mx + my * my + C1
        d2 = sxx + syy + C2
        lum = (2 * mx * my + C1) / d1
        cs = (2 * sxy + C2) / d2
        size = lum.shape[-1] * lum.shape[-2]
        if j == scales - 1:
            v = (lum * cs).reshape(x.shape[0], -1).mean(axis=1)
        else:
            v = cs.reshape(x.shape[0], -1).mean(axis=1)
        values.append(v)
        tape.append((x, y, fa, fb, mx, my, d1, d2, lum, cs, size))
        if j < scales - 1:
            pa, pb = _pool_matrix(h), _pool_matrix(w)
            x, y = _apply(pa, x, pb), _apply(pa, y, pb)
            tape[-1] = tape[-1] + (pa, pb)
    v = np.stack(values)  # (scales, C)
    clipped = np.maximum(v, 0.0)
    per_channel = np.prod(clipped ** weights[:, None], axis=0)
    return per_channel, (weights, v, tape)


def ms_ssim(xhat: np.ndarray, x: np.ndarray, scales: int = 3) -> float:
    """Mean over colour channels of the multi-scale SSIM.

    Negative per-scale terms are clipped to 0 before exponentiation, so the
    result lies in ``[0, 1]``.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if xhat.shape != x.shape:
        raise ConfigurationError(f"image shapes differ: {xhat.shape} vs {x.shape}")
    _check_size(x.shape, scales)
    per_channel, _ = _forward(xhat, x, scales)
    return float(per_channel.mean())


def ms_ssim_loss(xhat: np.ndarray, x: np.ndarray, scales: int = 3) -> float:
    return 100.0 * (1.0 - ms_ssim(xhat, x, scales))


def ms_ssim_loss_grad(xhat: np.ndarray, x: np.ndarray, scales: int = 3) -> tuple[float, np.ndarray]:
    """Loss ``100 (1 - MS-SSIM)`` and its gradient w.r.t. ``xhat``.

    Accepts a single ``(C,H,W)`` image or a batch; a batch loss is the mean
    over images.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if xhat.ndim == 4:
        losses, grads = zip(*(ms_ssim_loss_grad(a, b, scales) for a, b in zip(xhat, x)))
        nb = len(xhat)
        return float(np.mean(losses)), np.stack(grads) / nb
    _check_size(x.shape, scales)
    per_channel, (weights, v, tape) = _forward(xhat, x, scales)
    nc = xhat.shape[0]
    loss = 100.0 * (1.0 - per_channel.mean())
    dval = np.full(nc, -100.0 / nc)
    # d per_channel / d v_j = per_channel * w_j / v_j where v_j > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        dv = np.where(v > 0, per_channel[None] * weights[:, None] / v, 0.0) * dval[None]
    grad_x = None
    for j in reversed(range(scales)):
        entry = tape[j]
        xs, ys, fa, fb, mx, my, d1, d2, lum, cs, size = entry[:11]
        g = dv[j][:, None, None] / size
        if j == scales - 1:
            g_lum, g_cs = g * cs, g * lum
        else:
            g_lum, g_cs = np.zeros_like(lum), g * np.ones_like(cs)
        g_sxy = g_cs * 2.0 / d2
        g_sxx = -g_cs * cs / d2
        g_mx = g_lum * (2 * my - 2 * mx * lum) / d1 - my * g_sxy - 2 * mx * g_sxx
        gx = _apply(fa.T, g_mx, fb.T)
        gx += ys * _apply(fa.T, g_sxy, fb.T) + 2 * xs * _apply(fa.T, g_sxx, fb.T)
        if grad_x is not None:
            pa, pb = entry[11], entry[12]
            gx += _apply(pa.T, grad_x, pb.T)
        grad_x = gx
    return loss, grad_x

"""Importance map quantization, channel masks, rate loss and the two-stage relaxation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

P_CLAMP = 1e-6


@dataclass
class ImportanceConfig:
    L: int = 16
    n: int = 32
    r: float = 0.5
    gamma: float = 1e-4
    xi: float = 0.1
    alpha: float = 0.001

    def __post_init__(self):
        if self.L < 1 or self.n < 1 or self.n % self.L:
            raise ConfigurationError(f"n mod L must be 0 (n={self.n}, L={self.L})")
        if not 0.0 < self.r <= 1.0:
            raise ConfigurationError(f"rate threshold r must lie in (0, 1], got {self.r}")
        if self.xi <= 0 or self.alpha <= 0 or self.gamma < 0:
            raise ConfigurationError("xi and alpha must be positive, gamma non-negative")

    @property
    def group(self) -> int:
        """Channels switched on per importance level."""
        return self.n // self.L


def quantize_importance(p: np.ndarray, L: int) -> np.ndarray:
    """Bin ``p`` into ``L`` equal intervals: ``l`` iff ``l/L <= p < (l+1)/L``.

    Works on any array shape; a leading singleton channel axis is kept.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    lv = np.floor(p * L).astype(np.int64)
    # floor(p*L) can disagree with the interval test by one ulp for non-dyadic L
    lv = np.where(p < lv / L, lv - 1, lv)
    lv = np.where(p >= (lv + 1) / L, lv + 1, lv)
    return np.clip(lv, 0, L - 1)


def build_mask(qi: np.ndarray, n: int, L: int) -> np.ndarray:
    """Binary ``(n,h,w)`` mask (or ``(N,n,h,w)``) with ``m[k] = 1 iff k < (n/L)*qi``.

    ``qi`` may be ``(h,w)``, ``(1,h,w)`` or ``(N,1,h,w)``.
    """
    if n % L:
        raise ConfigurationError(f"n mod L must be 0 (n={n}, L={L})")
    qi = np.asarray(qi)
    if qi.ndim == 2:
        qi = qi[None]
    if qi.ndim == 3:
        k = np.arange(n)[:, None, None]
    elif qi.ndim == 4:
        k = np.arange(n)[None, :, None, None]
    else:
        raise ConfigurationError(f"unsupported importance map shape {qi.shape}")
    return (k < (n // L) * qi).astype(np.uint8)


def rate_loss(mask: np.ndarray, r: float) -> float:
    """Hinge on the number of stored codes: ``max(0, sum(m) - r*n*h*w)``."""
    return max(0.0, float(np.sum(mask)) - r * mask.size)


def rate_loss_from_levels(qi: np.ndarray, n: int, L: int, r: float, h: int, w: int) -> float:
    """Same hinge written on the quantized importance map directly."""
    return max(0.0, (n // L) * float(np.sum(qi)) - r * (n * h * w))


def level_objective(abs_grad: np.ndarray, cfg: ImportanceConfig, below_budget: bool) -> np.ndarray:
    """Per-position stage-1 objective for each candidate level.

    ``abs_grad`` is ``|dL_D/dz|`` with shape ``(n,h,w)``. Returns ``(L,h,w)``.
    The constant ``-r*n`` of the over-budget case is dropped; it does not
    change the argmin.
    """
    t = -cfg.xi * abs_grad
    if not below_budget:
        t = t + cfg.gamma
    g = cfg.group
    _, h, w = abs_grad.shape
    running = np.cumsum(t, axis=0)
    obj = np.zeros((cfg.L, h, w))
    # level l keeps channels 0 .. g*l-1
    obj[1:] = running[g - 1 : g * (cfg.L - 1) : g]
    return obj


def solve_optimal_levels(grad_z: np.ndarray, cfg: ImportanceConfig, below_budget: bool) -> np.ndarray:
    """Stage 1: exhaustive choice of the importance level at every position.

    ``grad_z`` is the distortion gradient w.r.t. the masked code ``z`` for one
    image, shape ``(n,h,w)``. ``below_budget`` is the batch-level test
    ``sum(m) < r*n*h*w`` made with the mask induced by the current importance
    map. Ties go to the smallest level. Returns ``(h,w)`` levels.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.ndim != 3 or grad_z.shape[0] != cfg.n:
        raise ConfigurationError(f"grad_z must be (n={cfg.n}, h, w), got {grad_z.shape}")
    obj = level_objective(np.abs(grad_z), cfg, below_budget)
    return np.argmin(obj, axis=0)


def importance_grad(p: np.ndarray, l_star: np.ndarray, alpha: float, L: int) -> np.ndarray:
    """Stage 2: gradient of ``alpha * |l* - p*L|`` as the sign-only proxy."""
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(l_star).reshape(p.shape) / L
    return np.where(p < target, -alpha, np.where(p > target, alpha, 0.0))

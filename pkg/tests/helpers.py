"""Shared oracles for the test-suite: finite differences and reference loops."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float | None = None) -> float:
    """Largest entrywise ``|a-b| / max(|a|, |b|, floor)``.

    Central differences carry about ``eps * |loss| / h`` of rounding noise, so
    entries far below the tensor's largest gradient cannot be resolved
    relatively. The default floor is ``1e-3`` of that largest magnitude
    (and at least ``1e-7``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if floor is None:
        floor = max(1e-7, 1e-3 * float(np.max(np.abs(b), initial=0.0)))
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def reference_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Quadruple-loop cross-correlation of a ``(C,H,W)`` input."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += xp[ic, i * stride + a, j * stride + bb] * w[oc, ic, a, bb]
                out[oc, i, j] = acc
    return out


def tiny_bundle(activation="tanh", n=4, L=2, T=4, seed=0, order="inclined", **imp_kw):
    """A few-hundred-parameter model for fast codec and gradient tests."""
    from cwic import autoenc as ae
    from cwic import importance as imp

    net = ae.NetworkConfig(channels=(3, 4, 5), n=n, activation=activation, first_depth=2, depth=2)
    cfg = imp.ImportanceConfig(L=L, n=n, **imp_kw)
    return ae.build_bundle(net, cfg, T, seed=seed, code_groups=2, imp_groups=2, order=order, resblocks=1)

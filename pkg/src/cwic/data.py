"""Synthetic training images: smooth colour gradients with textured patches.

Patches are aligned to the 8-pixel code grid so every code position is
either fully textured or fully smooth, which makes per-region importance
statistics unambiguous.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .ppm import from_planes, read_ppm, to_planes, write_ppm

BLOCK = 8


def _smooth(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    corners = rng.uniform(0.15, 0.85, size=(3, 2, 2))
    u = np.linspace(0.0, 1.0, h)[:, None]
    v = np.linspace(0.0, 1.0, w)[None, :]
    img = (
        corners[:, 0, 0, None, None] * (1 - u) * (1 - v)
        + corners[:, 0, 1, None, None] * (1 - u) * v
        + corners[:, 1, 0, None, None] * u * (1 - v)
        + corners[:, 1, 1, None, None] * u * v
    )
    return img


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = rng.integers(3)
    ii, jj = np.mgrid[0:h, 0:w]
    if kind == 0:
        t = rng.uniform(-1.0, 1.0, size=(h, w))
    elif kind == 1:
        period = int(rng.integers(1, 3))
        t = np.where(((ii // period) + (jj // period)) % 2 == 0, 1.0, -1.0)
    else:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.8, 1.6)
        t = np.sign(np.sin(freq * (np.cos(theta) * ii + np.sin(theta) * jj)) + 1e-9)
    tint = rng.uniform(0.5, 1.0, size=3)
    return tint[:, None, None] * t[None]


def make_toy_image(rng: np.random.Generator, size: int = 32, max_patches: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image (3,H,W) in [0,1], texture mask (H,W) bool)``."""
    img = _smooth(rng, size, size)
    tex = np.zeros((size, size), dtype=bool)
    cells = size // BLOCK
    for _ in range(int(rng.integers(1, max_patches + 1))):
        bh, bw = rng.integers(1, max(2, cells // 2 + 1), size=2)
        i0 = int(rng.integers(0, cells - bh + 1)) * BLOCK
        j0 = int(rng.integers(0, cells - bw + 1)) * BLOCK
        hh, ww = int(bh) * BLOCK, int(bw) * BLOCK
        amp = rng.uniform(0.2, 0.35)
        img[:, i0 : i0 + hh, j0 : j0 + ww] += amp * _texture(rng, hh, ww)
        tex[i0 : i0 + hh, j0 : j0 + ww] = True
    return np.clip(img, 0.0, 1.0), tex


def make_toy_corpus(count: int, size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``count`` images as ``(count,3,H,W)`` plus ``(count,H,W)`` texture masks.

    Images are quantized to 8 bits so they match what a PPM round trip gives.
    """
    rng = np.random.default_rng(seed)
    imgs, masks = zip(*(make_toy_image(rng, size) for _ in range(count)))
    x = np.stack([to_planes(from_planes(i)) for i in imgs])
    return x, np.stack(masks)


def code_regions(tex: np.ndarray) -> np.ndarray:
    """Per code position: 1 if its 8x8 block is textured, 0 if smooth."""
    h, w = tex.shape[-2:]
    blocks = tex.reshape(tex.shape[:-2] + (h // BLOCK, BLOCK, w // BLOCK, BLOCK)).mean(axis=(-3, -1))
    return (blocks >= 0.5).astype(np.uint8)


def write_corpus(directory: str | os.PathLike, images: np.ndarray) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, x in enumerate(images):
        p = d / f"img{i:05d}.ppm"
        write_ppm(p, from_planes(x))
        paths.append(p)
    return paths


def load_corpus(directory: str | os.PathLike) -> tuple[np.ndarray, list[Path]]:
    """Read every ``*.ppm`` in a directory (sorted) into ``(N,3,H,W)``."""
    paths = sorted(Path(directory).glob("*.ppm"))
    imgs = [to_planes(read_ppm(p)) for p in paths]
    return (np.stack(imgs) if imgs else np.zeros((0, 3, 0, 0))), paths

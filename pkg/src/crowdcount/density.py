"""Ground-truth density maps from head annotations.

Coordinates are pixel indices: pixel ``(r, c)`` has its center at ``(x=c, y=r)``.
Dot maps bin a head at ``floor(x / scale)``. Gaussian stamps place the head at the
continuous map position ``(x + 0.5) / scale`` and evaluate at map-pixel centers,
which keeps them exactly covariant under the image flip ``x -> W - 1 - x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIGMA_MIN = 1.0
SIGMA_MAX = 15.0
SIGMA_ISOLATED = 4.0


@dataclass
class PointSet:
    points: np.ndarray  # n x 2, columns (x, y)
    image_h: int
    image_w: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points):
            x, y = self.points[:, 0], self.points[:, 1]
            if (x < 0).any() or (x >= self.image_w).any() or (y < 0).any() or (y >= self.image_h).any():
                raise ValueError("annotation outside image bounds")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    values: np.ndarray  # h x w, nonnegative
    scale: int = 8

    def count(self) -> float:
        return float(self.values.sum())


def count(dm: DensityMap) -> float:
    return dm.count()


def map_shape(ps: PointSet, scale: int) -> tuple[int, int]:
    if ps.image_h % scale or ps.image_w % scale:
        raise ValueError(f"image {ps.image_h} x {ps.image_w} not divisible by scale {scale}")
    return ps.image_h // scale, ps.image_w // scale


def dot_map(ps: PointSet, scale: int = 8) -> DensityMap:
    h, w = map_shape(ps, scale)
    out = np.zeros((h, w))
    if len(ps):
        cols = np.floor(ps.points[:, 0] / scale).astype(int)
        rows = np.floor(ps.points[:, 1] / scale).astype(int)
        np.add.at(out, (rows, cols), 1.0)
    return DensityMap(out, scale)


def adaptive_sigmas(centers: np.ndarray, k: int = 3, beta: float = 0.3) -> np.ndarray:
    """beta * mean distance to the k nearest other heads, in map pixels, clamped."""
    n = len(centers)
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.array([SIGMA_ISOLATED])
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    kk = min(k, n - 1)
    nearest = np.sort(dist, axis=1)[:, :kk]
    return np.clip(beta * nearest.mean(axis=1), SIGMA_MIN, SIGMA_MAX)


def gaussian_stamp(cx: float, cy: float, sigma: float, h: int, w: int) -> tuple[slice, slice, np.ndarray]:
    """Unit-mass Gaussian truncated at +-4 sigma and clipped to the map."""
    r = 4.0 * sigma
    c0, c1 = max(int(np.floor(cx - r)), 0), min(int(np.ceil(cx + r)), w)
    r0, r1 = max(int(np.floor(cy - r)), 0), min(int(np.ceil(cy + r)), h)
    xs = np.arange(c0, c1) + 0.5 - cx
    ys = np.arange(r0, r1) + 0.5 - cy
    gx = np.exp(-0.5 * (xs / sigma) ** 2) * (np.abs(xs) <= r)
    gy = np.exp(-0.5 * (ys / sigma) ** 2) * (np.abs(ys) <= r)
    kern = np.outer(gy, gx)
    total = kern.sum()
    if total <= 0:
        # support narrower than a pixel: all mass to the containing pixel
        rr, cc = min(int(cy), h - 1), min(int(cx), w - 1)
        return slice(rr, rr + 1), slice(cc, cc + 1), np.ones((1, 1))
    return slice(r0, r1), slice(c0, c1), kern / total


def adaptive_density(ps: PointSet, scale: int = 8, k: int = 3, beta: float = 0.3,
                     sigma: float | None = None) -> DensityMap:
    """Adaptive-Gaussian smoothed map; each head contributes exactly unit mass.

    ``sigma`` fixes the kernel width (map pixels) for every head instead.
    """
    h, w = map_shape(ps, scale)
    out = np.zeros((h, w))
    if not len(ps):
        return DensityMap(out, scale)
    centers = (ps.points + 0.5) / scale
    sigmas = np.full(len(ps), float(sigma)) if sigma is not None else adaptive_sigmas(centers, k, beta)
    for (cx, cy), s in zip(centers, sigmas):
        rs, cs, kern = gaussian_stamp(cx, cy, s, h, w)
        out[rs, cs] += kern
    return DensityMap(out, scale)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary graymap with the maximum value scaled to 255."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max() if v.size else 0.0
    img = np.zeros(v.shape, dtype=np.uint8) if peak <= 0 else np.round(255.0 * np.clip(v, 0, None) / peak).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())

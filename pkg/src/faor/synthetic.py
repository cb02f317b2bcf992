"""Procedural panoramas for toy training and tests.

Images are spherical Voronoi mosaics. Every cell carries its own texture
(flat, sinusoidal stripes, hard-edged rings or a checkerboard) defined on the unit sphere, so
the ERP rendering stretches horizontally toward the poles the same way real
360 content does. The cell index doubles as an instance-segmentation map.
"""
from __future__ import annotations

import numpy as np

__all__ = ["unit_vectors", "synthetic_odi", "synthetic_dataset"]


def unit_vectors(height: int, width: int, supersample: int = 1) -> np.ndarray:
    """Unit vectors of (sub)pixel centers, shape ``(H*k, W*k, 3)``."""
    h, w = height * supersample, width * supersample
    lat = (0.5 - (np.arange(h) + 0.5) / h) * np.pi
    lon = ((np.arange(w) + 0.5) / w - 0.5) * 2 * np.pi
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def _random_directions(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synthetic_odi(height: int = 256, width: int = 512, seed: int = 0,
                  n_cells: int | None = None, supersample: int = 2):
    """Render one panorama -> ``(image float32 (H, W, 3) in [0, 1], ids uint16 (H, W))``."""
    rng = np.random.default_rng(seed)
    n_cells = n_cells or int(rng.integers(10, 24))
    centers = _random_directions(rng, n_cells)
    p = unit_vectors(height, width, supersample)
    ids = np.argmax(p @ centers.T, axis=-1)

    img = np.empty(p.shape[:2] + (3,))
    for c in range(n_cells):
        mask = ids == c
        q = p[mask]
        base = rng.uniform(0.1, 0.9, 3)
        kind = rng.integers(0, 4)
        axis = _random_directions(rng, 1)[0]
        amp = rng.uniform(-1, 1, 3)
        if kind == 0:
            val = np.broadcast_to(base, q.shape)
        elif kind == 1:
            # sinusoidal stripes, wavelength 0.06-0.25 rad
            omega = 2 * np.pi / rng.uniform(0.06, 0.25)
            wave = np.sin(omega * (q @ axis) + rng.uniform(0, 2 * np.pi))
            val = base + 0.3 * wave[:, None] * amp
        elif kind == 2:
            # hard-edged rings around a random pole
            ang = np.arccos(np.clip(q @ axis, -1, 1))
            omega = 2 * np.pi / rng.uniform(0.08, 0.3)
            wave = np.sign(np.sin(omega * ang))
            val = base + 0.25 * wave[:, None] * amp
        else:
            # checkerboard in a rotated longitude/latitude frame
            e1 = np.cross(axis, [0.0, 0.0, 1.0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(axis, e1)
            u = np.arctan2(q @ e2, q @ e1)
            v = np.arcsin(np.clip(q @ axis, -1, 1))
            f = rng.uniform(8, 24)
            wave = np.sign(np.sin(f * u)) * np.sign(np.sin(f * v))
            val = base + 0.2 * wave[:, None] * amp
        img[mask] = val

    k = supersample
    h, w = height, width
    img = img.reshape(h, k, w, k, 3).mean(axis=(1, 3))
    ids = ids.reshape(h, k, w, k)[:, k // 2, :, k // 2]
    return np.clip(img, 0.0, 1.0).astype(np.float32), (ids + 1).astype(np.uint16)


def synthetic_dataset(n: int, height: int = 256, width: int = 512, seed: int = 0):
    """``n`` panoramas with seeds ``seed, seed + 1, ...`` as ``(image, ids)`` pairs."""
    return [synthetic_odi(height, width, seed + i) for i in range(n)]

"""Quality metrics for ERP images.

WS-PSNR and WS-SSIM weight each row by the cosine of its latitude (the same
weight as :func:`faor.geometry.latitude_weights`). By default, images are
compared on BT.601 luminance after rounding to 8 bits.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import latitude_weights

__all__ = [
    "PSNR_CAP",
    "psnr",
    "ws_psnr",
    "ws_ssim",
    "ssim_map",
    "to_luminance",
    "quantize",
    "MetricReport",
    "evaluate_pair",
]

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-10


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr(a, b, peak: float = 255.0) -> float:
    a, b = _pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def ws_psnr(a, b, peak: float = 255.0) -> float:
    """Latitude-weighted PSNR in dB, capped at 99 dB."""
    a, b = _pair(a, b)
    w = latitude_weights(a.shape[0])[:, None, None]
    err = (a - b) ** 2
    wmse = float(np.sum(w * err) / (np.sum(w) * a.shape[1] * a.shape[2]))
    return _psnr_from_mse(wmse, peak)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="nearest")
    out = correlate1d(out, win, axis=1, mode="nearest")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(a, b, peak: float = 255.0, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """SSIM of every full-window position of two single-channel images.

    The result has shape ``(H - size + 1, W - size + 1)``; row ``i`` is
    centered on image row ``i + size // 2``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < size:
        raise ValueError(f"image {a.shape} smaller than the {size}x{size} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = _gaussian_window(size, sigma)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a * mu_a
    sbb = _filter_valid(b * b, win) - mu_b * mu_b
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ws_ssim(a, b, peak: float = 255.0, weights=None) -> float:
    """Cosine-latitude weighted mean of the SSIM map.

    Multi-channel inputs are averaged per channel. ``weights`` overrides
    the per-row weights of the full image (length ``H``).
    """
    a, b = _pair(a, b)
    height = a.shape[0]
    w = latitude_weights(height) if weights is None else np.asarray(weights, dtype=np.float64)
    vals = []
    for ch in range(a.shape[2]):
        m = ssim_map(a[..., ch], b[..., ch], peak)
        r = (height - m.shape[0]) // 2
        rows = w[r:r + m.shape[0]]
        # row means first: identical inputs then give exactly 1.0
        vals.append(float(np.sum(rows * m.mean(axis=1)) / np.sum(rows)))
    return float(np.mean(vals))


def quantize(img) -> np.ndarray:
    """[0, 1] floats -> 8-bit levels (as float64), rounding half up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)


def to_luminance(img8) -> np.ndarray:
    """BT.601 luma (studio range 16..235) of 8-bit RGB values."""
    img8 = np.asarray(img8, dtype=np.float64)
    return 16.0 + (65.481 * img8[..., 0] + 128.553 * img8[..., 1] + 24.966 * img8[..., 2]) / 255.0


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    ws_psnr: list[float] = field(default_factory=list)
    ws_ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)

    def add(self, name: str, values: dict):
        self.names.append(name)
        self.ws_psnr.append(values["ws_psnr"])
        self.ws_ssim.append(values["ws_ssim"])
        self.psnr.append(values["psnr"])

    def mean(self) -> dict:
        return {
            "ws_psnr": float(np.mean(self.ws_psnr)),
            "ws_ssim": float(np.mean(self.ws_ssim)),
            "psnr": float(np.mean(self.psnr)),
        }

    def rows(self):
        for row in zip(self.names, self.ws_psnr, self.ws_ssim, self.psnr):
            yield row
        m = self.mean()
        yield ("mean", m["ws_psnr"], m["ws_ssim"], m["psnr"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "ws_psnr", "ws_ssim", "psnr"])
        for name, a, b, c in self.rows():
            writer.writerow([name, f"{a:.6f}", f"{b:.6f}", f"{c:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        width = max([len(n) for n in self.names] + [5])
        lines = [f"{'image':<{width}}  {'WS-PSNR':>8}  {'WS-SSIM':>8}  {'PSNR':>8}"]
        lines.append("-" * len(lines[0]))
        for name, a, b, c in self.rows():
            lines.append(f"{name:<{width}}  {a:8.3f}  {b:8.4f}  {c:8.3f}")
        return "\n".join(lines)


def evaluate_pair(pred, gt, channel: str = "y") -> dict:
    """Metrics of two [0, 1] RGB images after 8-bit rounding.

    ``channel="y"`` compares BT.601 luminance, ``"rgb"`` all three channels.
    """
    a, b = quantize(pred), quantize(gt)
    if channel == "y":
        a, b = to_luminance(a), to_luminance(b)
    elif channel != "rgb":
        raise ValueError(f"unknown channel mode {channel!r}")
    return {"ws_psnr": ws_psnr(a, b), "ws_ssim": ws_ssim(a, b), "psnr": psnr(a, b)}

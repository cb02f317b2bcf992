"""Random-scale self-supervised training.

Each step crops a ``round(base * r)`` square from an HR panorama, shrinks it
to ``base x base`` with bicubic interpolation, and supervises the model at
randomly drawn HR pixels of the crop with an L1 loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Parameter
from .geometry import ErpGrid, PatchGrid, pixel_to_spherical, round_half_away
from .model import FAOR, PriorMaps
from .resampling import lattice_positions, resample_at_positions

__all__ = [
    "TrainConfig",
    "TrainSample",
    "AdamState",
    "make_pair",
    "l1_loss",
    "adam_step",
    "lr_at",
    "train_loop",
    "TrainResult",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_patch: int = 128
    r_min: float = 1.0
    r_max: float = 4.0
    pixels_per_patch: int = 16384
    lr0: float = 1e-4
    lr_milestones: tuple[int, ...] = (30000, 50000, 100000, 400000)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 1000
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if not (1.0 <= self.r_min <= self.r_max):
            raise ValueError("scale range must satisfy 1 <= r_min <= r_max")
        if self.pixels_per_patch < 1 or self.base_patch < 1:
            raise ValueError("base_patch and pixels_per_patch must be positive")


@dataclass
class TrainSample:
    lr_patch: np.ndarray  # (base, base, 3)
    lr_grid: PatchGrid
    priors: PriorMaps
    gt_lat: np.ndarray
    gt_lon: np.ndarray
    gt_rows: np.ndarray  # fractional positions in lr_patch index space
    gt_cols: np.ndarray
    gt_values: np.ndarray  # (n, 3)
    r: float
    crop: tuple[int, int, int]  # top, left, size in the full image


def make_pair(hr_image: np.ndarray, r: float, rng: np.random.Generator,
              base_patch: int = 128, pixels_per_patch: int = 16384,
              segmentation: np.ndarray | None = None) -> TrainSample:
    """Build one LR patch plus randomly sampled HR supervision pixels.

    Ground-truth coordinates are expressed in the frame of the full image,
    so the model sees the true latitude of every patch.
    """
    height, width = hr_image.shape[:2]
    size = round_half_away(base_patch * r)
    if size > height or size > width:
        raise ValueError(f"{height}x{width} image too small for a {size}x{size} crop (r={r:.3f})")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    crop = np.asarray(hr_image[top:top + size, left:left + size], dtype=np.float64)
    full = ErpGrid(height, width)

    # bicubic shrink of the crop; the crop itself is a non-wrapping window
    crop_grid = PatchGrid(size, size, 0.0, 0.0, full.lat_step, full.lon_step)
    pos = lattice_positions(size, base_patch)
    lr = resample_at_positions(crop, crop_grid, pos, pos, "bicubic")

    step = size / base_patch
    first = top + 0.5 * step - 0.5
    first_col = left + 0.5 * step - 0.5
    lr_grid = PatchGrid(
        base_patch, base_patch,
        lat0=(0.5 - (first + 0.5) / height) * math.pi,
        lon0=((first_col + 0.5) / width - 0.5) * 2 * math.pi,
        lat_step=step * full.lat_step,
        lon_step=step * full.lon_step,
    )

    m_s = None
    if segmentation is not None:
        centers = np.floor(np.arange(base_patch) * step + 0.5 * step).astype(np.int64)
        m_s = segmentation[top + centers][:, left + centers]
    priors = PriorMaps.for_grid(lr_grid, m_s)

    ys = rng.integers(0, size, pixels_per_patch)
    xs = rng.integers(0, size, pixels_per_patch)
    coord = pixel_to_spherical(full, top + ys, left + xs)
    return TrainSample(
        lr_patch=lr,
        lr_grid=lr_grid,
        priors=priors,
        gt_lat=np.atleast_1d(coord.lat),
        gt_lon=np.atleast_1d(coord.lon),
        gt_rows=(ys + 0.5) / step - 0.5,
        gt_cols=(xs + 0.5) / step - 0.5,
        gt_values=crop[ys, xs],
        r=float(r),
        crop=(top, left, size),
    )


def l1_loss(pred, gt) -> float:
    """Mean absolute difference over all samples and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], grads: list[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def lr_at(iteration: int, lr0: float = 1e-4,
          milestones=(30000, 50000, 100000, 400000)) -> float:
    """Learning rate halved at every milestone already reached."""
    return lr0 * 0.5 ** sum(1 for m in milestones if m <= iteration)


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]  # (iteration, lr, loss) for every step
    model: FAOR

    @property
    def losses(self) -> np.ndarray:
        return np.array([h[2] for h in self.history])


def train_loop(dataset, model: FAOR, config: TrainConfig, checkpoint_dir=None,
               callback=None) -> TrainResult:
    """Train ``model`` in place on ``dataset``.

    ``dataset`` is a sequence of ``(image, segmentation_or_None)`` pairs with
    images in [0, 1]. Sample order depends only on ``config.seed``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    params = model.parameters()
    history = []
    for it in range(config.max_iters):
        image, seg = dataset[int(rng.integers(len(dataset)))]
        r = float(rng.uniform(config.r_min, config.r_max))
        sample = make_pair(image, r, rng, config.base_patch, config.pixels_per_patch, seg)
        lr = lr_at(it, config.lr0, config.lr_milestones)

        model.zero_grad()
        try:
            pred = model.predict_at(sample.lr_patch, sample.priors, sample.lr_grid,
                                    sample.gt_lat, sample.gt_lon, sample.gt_rows, sample.gt_cols)
            loss = ad.l1_loss(pred, sample.gt_values)
            loss.backward()
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {it} (r={r:.3f}): {exc}") from exc
        adam_step(params, [p.grad for p in params], state, lr,
                  config.beta1, config.beta2, config.eps)

        value = float(loss.data)
        history.append((it, lr, value))
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d lr %.3g loss %.5f", it, lr, value)
        if callback is not None:
            callback(it, value)
        if checkpoint_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            model.save(f"{checkpoint_dir}/checkpoint_{it + 1:06d}.faor")
    return TrainResult(history, model)

"""The FAOR super-resolution network.

Pipeline: the encoder lifts the ERP image to ``D`` channels and runs ``L``
blocks (LayerNorm -> prior-conditioned affine modulation -> channel
cross-attention -> residual MLP). The latent grid is then resampled to the
target lattice with geodesic slerp, and an MLP maps each resampled latent
vector plus its spherical coordinate to RGB, once per output pixel.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .geometry import ErpGrid, PatchGrid, hr_coordinate_grid, latitude_weights
from .resampling import RESAMPLERS, resample, resampling_operator

__all__ = ["ModelConfig", "PriorMaps", "FAOR", "encode_coordinates"]


@dataclass
class ModelConfig:
    num_blocks: int = 4
    channels: int = 32
    attention_scale: float | None = None  # d_k; None means channels
    mlp_hidden: int = 64
    coord_encoding: str = "raw"  # "raw" or "sincos"
    coord_frequencies: int = 4
    lift_kernel: int = 1  # 1 (pointwise) or 3
    resampler: str = "geodesic"  # ablation: "bilinear"
    use_priors: bool = True  # ablation: feed all-zero priors

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.channels < 2:
            raise ValueError("channels must be >= 2")
        if self.lift_kernel not in (1, 3):
            raise ValueError("lift_kernel must be 1 or 3")
        if self.coord_encoding not in ("raw", "sincos"):
            raise ValueError(f"unknown coord_encoding {self.coord_encoding!r}")
        if self.resampler not in RESAMPLERS:
            raise ValueError(f"unknown resampler {self.resampler!r}")

    @property
    def d_k(self) -> float:
        return float(self.attention_scale or self.channels)

    @property
    def coord_dims(self) -> int:
        return 2 if self.coord_encoding == "raw" else 2 + 4 * self.coord_frequencies

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PriorMaps:
    """Stretching-ratio map (scaled to [0, 1]) and instance-id map."""

    m_d: np.ndarray
    m_s: np.ndarray

    def __post_init__(self):
        self.m_d = np.asarray(self.m_d, dtype=np.float64)
        self.m_s = np.asarray(self.m_s)
        if self.m_d.shape != self.m_s.shape:
            raise ValueError("prior maps differ in shape")
        if not np.issubdtype(self.m_s.dtype, np.integer):
            raise ValueError("instance map must hold integer ids")

    @property
    def shape(self) -> tuple[int, int]:
        return self.m_d.shape

    @classmethod
    def for_grid(cls, grid: ErpGrid | PatchGrid, m_s=None) -> PriorMaps:
        """Analytic stretching map at the grid's own resolution.

        For patches the rows are evaluated at their latitude in the full
        image, which equals the ERP map ``cos((h + 0.5 - H/2) / H * pi)``.
        """
        if isinstance(grid, ErpGrid):
            rows = latitude_weights(grid.height)
        else:
            rows = np.cos(grid.lats)
        m_d = np.repeat(rows[:, None], grid.width, axis=1)
        if m_s is None:
            m_s = np.zeros(grid.shape, dtype=np.int64)
        return cls(m_d, m_s)

    def stack(self) -> np.ndarray:
        """``(H, W, 2)`` network input: ``[m_d, (id mod 256) / 255]``."""
        seg = (self.m_s.astype(np.int64) % 256) / 255.0
        return np.stack([self.m_d, seg], axis=-1)


def encode_coordinates(lat, lon, config: ModelConfig) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64).reshape(-1)
    lon = np.asarray(lon, dtype=np.float64).reshape(-1)
    feats = [lat * (2.0 / math.pi), lon / math.pi]
    if config.coord_encoding == "sincos":
        for k in range(config.coord_frequencies):
            f = 2.0 ** k
            feats += [np.sin(f * lat), np.cos(f * lat), np.sin(f * lon), np.cos(f * lon)]
    return np.stack(feats, axis=-1)


class FAOR:
    """Parameters plus forward passes of the network.

    Branch-terminal layers (modulation output, attention MLP output, block
    MLP output, SGIF output) start at zero, so a fresh model has identity
    blocks, identity modulation and predicts black.
    """

    SGIF_CHUNK = 65536

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.sgif_evaluations = 0
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------------

    def _linear(self, rng, name, n_in, n_out, zero=False):
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(n_out))

    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = Parameter(value, name, dtype=self.dtype)

    def _build(self, rng):
        c = self.config
        d, h = c.channels, c.mlp_hidden
        self._linear(rng, "lift", 3 * c.lift_kernel ** 2, d)
        for i in range(c.num_blocks):
            p = f"block{i}"
            self._add(f"{p}.ln1.g", np.ones(d))
            self._add(f"{p}.ln1.b", np.zeros(d))
            self._linear(rng, f"{p}.atfm.fc1", 2, d)
            self._linear(rng, f"{p}.atfm.fc2", d, 2 * d, zero=True)
            for n in ("q", "k", "v"):
                self._linear(rng, f"{p}.ca.{n}", d, d)
            self._linear(rng, f"{p}.ca.mlp1", d, h)
            self._linear(rng, f"{p}.ca.mlp2", h, d, zero=True)
            self._add(f"{p}.ln2.g", np.ones(d))
            self._add(f"{p}.ln2.b", np.zeros(d))
            self._linear(rng, f"{p}.mlp1", d, h)
            self._linear(rng, f"{p}.mlp2", h, d, zero=True)
        n_in = d + c.coord_dims
        self._linear(rng, "sgif.fc1", n_in, h)
        self._linear(rng, "sgif.fc2", h, h)
        self._linear(rng, "sgif.fc3", h, h)
        self._linear(rng, "sgif.fc4", h, 3, zero=True)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> FAOR:
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def apply(self, name: str, x: Tensor) -> Tensor:
        return ad.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def mlp(self, name1: str, name2: str, x: Tensor) -> Tensor:
        return self.apply(name2, ad.gelu(self.apply(name1, x)))

    # -- encoder --------------------------------------------------------------------

    def atfm_forward(self, block: int, f_ln: Tensor, priors: np.ndarray) -> Tensor:
        """``alpha * f_ln + beta`` with ``(alpha - 1, beta)`` predicted from the priors."""
        if priors.shape[:2] != f_ln.shape[:2]:
            raise ValueError(f"priors {priors.shape[:2]} do not match features {f_ln.shape[:2]}")
        d = self.config.channels
        cond = self.mlp(f"block{block}.atfm.fc1", f"block{block}.atfm.fc2",
                        Tensor(priors.astype(self.dtype, copy=False)))
        d_alpha, beta = cond[..., :d], cond[..., d:]
        return f_ln + f_ln * d_alpha + beta

    def attention_weights(self, block: int, f_ln: Tensor, f_at: Tensor) -> Tensor:
        """Row-softmax of the ``D x D`` channel affinity between query and key."""
        p = f"block{block}.ca"
        n = f_ln.shape[0] * f_ln.shape[1]
        d = self.config.channels
        q = self.apply(f"{p}.q", f_ln).reshape(n, d)
        k = self.apply(f"{p}.k", f_at).reshape(n, d)
        # averaged over positions so the logits do not grow with image size
        logits = ad.matmul(ad.transpose(q), k) * (1.0 / (math.sqrt(self.config.d_k) * n))
        return ad.softmax(logits, axis=-1)

    def cross_attention(self, block: int, f_ln: Tensor, f_at: Tensor) -> Tensor:
        if f_ln.shape != f_at.shape:
            raise ValueError("cross_attention inputs differ in shape")
        p = f"block{block}.ca"
        h, w, d = f_ln.shape
        attn = self.attention_weights(block, f_ln, f_at)
        v = self.apply(f"{p}.v", f_at).reshape(h * w, d)
        mixed = ad.matmul(v, ad.transpose(attn)).reshape(h, w, d)
        return self.mlp(f"{p}.mlp1", f"{p}.mlp2", mixed)

    def encoder_block(self, block: int, f_l: Tensor, priors: np.ndarray) -> Tensor:
        p = f"block{block}"
        f_ln = ad.layer_norm(f_l, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
        f_at = self.atfm_forward(block, f_ln, priors)
        f_ca = f_l + self.cross_attention(block, f_ln, f_at)
        normed = ad.layer_norm(f_ca, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
        return f_ca + self.mlp(f"{p}.mlp1", f"{p}.mlp2", normed)

    def prior_input(self, priors: PriorMaps | None, shape) -> np.ndarray:
        if priors is None or not self.config.use_priors:
            return np.zeros((*shape, 2))
        if priors.shape != tuple(shape):
            raise ValueError(f"priors {priors.shape} do not match image {tuple(shape)}")
        return priors.stack()

    def safe_encode(self, x, priors: PriorMaps | None = None, wrap: bool = True) -> Tensor:
        """Encode an ``(H, W, 3)`` image in [0, 1] into an ``(H, W, D)`` latent grid."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {x.shape}")
        prior_arr = self.prior_input(priors, x.shape[:2])
        if self.config.lift_kernel == 3:
            x = ad.im2col3x3(x, wrap=wrap)
        f = self.apply("lift", x)
        for i in range(self.config.num_blocks):
            f = self.encoder_block(i, f, prior_arr)
        return f

    # -- implicit function --------------------------------------------------------

    def sgif_forward(self, z_hat: Tensor, lat, lon) -> Tensor:
        """Batched implicit function: ``(N, D)`` latents + ``N`` coordinates -> ``(N, 3)``."""
        coords = Tensor(encode_coordinates(lat, lon, self.config).astype(self.dtype))
        if coords.shape[0] != z_hat.shape[0]:
            raise ValueError("latent and coordinate counts differ")
        self.sgif_evaluations += z_hat.shape[0]
        h = ad.concat([z_hat, coords], axis=-1)
        h = ad.gelu(self.apply("sgif.fc1", h))
        h = ad.gelu(self.apply("sgif.fc2", h))
        h = ad.gelu(self.apply("sgif.fc3", h))
        return self.apply("sgif.fc4", h)

    def sgif_predict(self, z_hat, lat: float, lon: float) -> np.ndarray:
        """RGB for a single latent vector at ``(lat, lon)``."""
        z = np.asarray(z_hat, dtype=self.dtype).reshape(1, -1)
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite latent vector")
        with ad.no_grad():
            return self.sgif_forward(Tensor(z), [lat], [lon]).data[0]

    # -- composed passes ----------------------------------------------------------

    def predict_at(self, x, priors, src: ErpGrid | PatchGrid, lat, lon, rows, cols) -> Tensor:
        """Differentiable prediction at scattered targets.

        ``rows``/``cols`` are the targets' fractional positions in ``src``
        index space and ``lat``/``lon`` their spherical coordinates.
        """
        z = self.safe_encode(x, priors, wrap=src.wraps)
        h, w, d = z.shape
        op = resampling_operator(src, rows, cols, self.config.resampler)
        z_hat = ad.sparse_apply(op, z.reshape(h * w, d))
        return self.sgif_forward(z_hat, lat, lon)

    def super_resolve(self, x, scale: float, priors: PriorMaps | None = None,
                      timings: dict | None = None) -> np.ndarray:
        """Upscale a full ERP image by ``scale``; output is clamped to [0, 1]."""
        x = np.asarray(x, dtype=self.dtype)
        grid = ErpGrid(x.shape[0], x.shape[1])
        targets = hr_coordinate_grid(grid, scale)
        t0 = time.perf_counter()
        with ad.no_grad():
            z = self.safe_encode(x, priors, wrap=True).data
            t1 = time.perf_counter()
            z_hat = resample(z, grid, targets, self.config.resampler)
            t2 = time.perf_counter()
            hh, ww, d = z_hat.shape
            lat, lon = targets.mesh()
            flat = z_hat.reshape(-1, d)
            lat, lon = lat.reshape(-1), lon.reshape(-1)
            out = np.empty((hh * ww, 3), dtype=self.dtype)
            for s in range(0, hh * ww, self.SGIF_CHUNK):
                e = s + self.SGIF_CHUNK
                out[s:e] = self.sgif_forward(Tensor(flat[s:e]), lat[s:e], lon[s:e]).data
            t3 = time.perf_counter()
        if timings is not None:
            timings["encode_ms"] = 1e3 * (t1 - t0)
            timings["resample_ms"] = 1e3 * (t2 - t1)
            timings["sgif_ms"] = 1e3 * (t3 - t2)
        return np.clip(out.reshape(hh, ww, 3), 0.0, 1.0)

    # -- persistence ------------------------------------------------------------------

    def save(self, path):
        ad.save_checkpoint(path, self.parameters(), json.dumps(self.config.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path, dtype=np.float32) -> FAOR:
        arrays, meta = ad.load_checkpoint(path)
        config = ModelConfig.from_dict(json.loads(meta)) if meta else ModelConfig()
        model = cls(config, dtype=dtype)
        missing = set(model.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in model.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = arrays[name].astype(model.dtype)
        return model

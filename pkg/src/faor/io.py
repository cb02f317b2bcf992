"""Image, prior-map, config and manifest files."""
from __future__ import annotations

import json
import os
import re
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import png

from . import __version__
from .geometry import DistortionMap

__all__ = [
    "ImageFormatError",
    "load_image",
    "save_image",
    "load_instance_map",
    "save_instance_map",
    "save_distortion_map",
    "load_float32",
    "read_config",
    "write_config",
    "split_config",
    "RunManifest",
    "version_string",
]


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""


# -- PNG / PNM -------------------------------------------------------------------

def _read_png(path) -> tuple[np.ndarray, int]:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except (png.Error, OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    planes = info["planes"]
    if data.shape != (height, width * planes):
        raise ImageFormatError(f"{path}: truncated image data")
    return data.reshape(height, width, planes), info["bitdepth"]


_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: only binary PGM/PPM (P5/P6) is supported")
    pos, vals = 2, []
    for _ in range(3):
        m = _PNM_TOKEN.match(blob, pos)
        if m is None:
            raise ImageFormatError(f"{path}: bad header")
        vals.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = vals
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace before the raster
    planes = 3 if blob[:2] == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * planes
    raw = np.frombuffer(blob, dtype=dtype, count=-1, offset=pos) if len(blob) > pos else np.empty(0)
    if raw.size < count:
        raise ImageFormatError(f"{path}: truncated raster")
    depth = 16 if maxval > 255 else 8
    return raw[:count].astype(np.uint32).reshape(height, width, planes), depth


def _read_raw(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _read_png(path)
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _read_pnm(path)
    raise ImageFormatError(f"{path}: unsupported format {suffix!r}")


def load_image(path) -> np.ndarray:
    """Decode an 8/16-bit PNG or binary PPM/PGM into float64 RGB in [0, 1]."""
    data, depth = _read_raw(path)
    planes = data.shape[2]
    if planes in (2, 4):  # drop alpha
        data = data[..., :planes - 1]
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return data.astype(np.float64) / (2 ** depth - 1)


def _quantize(image, depth):
    top = 2 ** depth - 1
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * top + 0.5).astype(np.uint32)


def _write_png(path, levels: np.ndarray, depth: int):
    h, w, planes = levels.shape
    writer = png.Writer(w, h, greyscale=planes == 1, bitdepth=depth)
    with open(path, "wb") as fh:
        writer.write(fh, levels.reshape(h, w * planes).tolist())


def save_image(image, path, bitdepth: int = 8) -> None:
    """Encode a [0, 1] image (H, W, 3) or (H, W); values round half up."""
    path = Path(path)
    if bitdepth not in (8, 16):
        raise ValueError("bitdepth must be 8 or 16")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    levels = _quantize(image, bitdepth)
    suffix = path.suffix.lower()
    if suffix == ".png":
        _write_png(path, levels, bitdepth)
    elif suffix in (".ppm", ".pgm", ".pnm"):
        planes = levels.shape[2]
        magic = b"P6" if planes == 3 else b"P5"
        h, w = levels.shape[:2]
        dtype = ">u2" if bitdepth == 16 else "u1"
        with open(path, "wb") as fh:
            fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, 2 ** bitdepth - 1))
            fh.write(levels.astype(dtype).tobytes())
    else:
        raise ImageFormatError(f"{path}: unsupported format {suffix!r}")


def load_instance_map(path) -> np.ndarray:
    """Instance ids from a single-channel 8/16-bit PNG (0 = background)."""
    data, _ = _read_raw(path)
    if data.shape[2] != 1:
        raise ImageFormatError(f"{path}: instance map must be single-channel")
    return data[..., 0].astype(np.int64)


def save_instance_map(ids, path) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 65535:
        raise ValueError("instance ids must fit in 16 bits")
    _write_png(path, ids.astype(np.uint32)[..., None], 16)


def save_distortion_map(dmap: DistortionMap, png_path, raw_path) -> None:
    """8-bit grayscale PNG (nearest integer) plus a little-endian float32 sidecar."""
    values = np.asarray(dmap.values, dtype=np.float64)
    _write_png(png_path, np.floor(values + 0.5).astype(np.uint32)[..., None], 8)
    np.ascontiguousarray(values, dtype="<f4").tofile(raw_path)


def load_float32(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ImageFormatError(f"{path}: expected {np.prod(shape)} floats, found {data.size}")
    return data.reshape(shape)


# -- config files ----------------------------------------------------------------

# short keys accepted in config files -> ModelConfig / TrainConfig field names
_ALIASES = {
    "L": "num_blocks",
    "D": "channels",
    "d_k": "attention_scale",
    "priors": "use_priors",
}


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in text:
        return tuple(_parse_value(t.strip()) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[_ALIASES.get(key, key)] = _parse_value(value)
    return out


def write_config(values: dict, path) -> None:
    inverse = {v: k for k, v in _ALIASES.items()}
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{inverse.get(key, key)} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def split_config(values: dict):
    """Split a parsed config into ``(ModelConfig, TrainConfig)``."""
    from .model import ModelConfig
    from .training import TrainConfig

    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model = ModelConfig(**{k: v for k, v in values.items() if k in model_keys})
    train_vals = {k: v for k, v in values.items() if k in train_keys}
    if isinstance(train_vals.get("lr_milestones"), (int, float)):
        train_vals["lr_milestones"] = (train_vals["lr_milestones"],)
    return model, TrainConfig(**train_vals)


# -- manifests -------------------------------------------------------------------

def version_string() -> str:
    """Package version, plus the short commit hash when run from a git checkout."""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=os.path.dirname(__file__), capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config_path: str | None = None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    seed: int | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: str = field(default_factory=version_string)

    def write(self, path) -> None:
        for k, v in self.timings_ms.items():
            if v < 0:
                raise ValueError(f"negative timing {k}={v}")
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))

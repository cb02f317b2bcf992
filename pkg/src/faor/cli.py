"""Command-line interface: ``faor <command> [options]``.

Commands: ``gen-priors``, ``upscale``, ``train``, ``eval``, ``bench`` and
``synth``. Every command writes a JSON manifest next to its outputs.
Exit codes: 0 success, 2 bad input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import io as fio
from .autodiff import NonFiniteError
from .geometry import ErpGrid, distortion_map, hr_coordinate_grid
from .metrics import MetricReport, evaluate_pair
from .model import FAOR, ModelConfig, PriorMaps
from .resampling import RESAMPLERS, resample
from .synthetic import synthetic_odi
from .training import train_loop

log = logging.getLogger("faor")

EXIT_OK, EXIT_BAD_INPUT, EXIT_NUMERIC = 0, 2, 3
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")
SEG_SUFFIX = "_seg"


class BadInput(Exception):
    pass


def _seed(default: int | None) -> int | None:
    env = os.environ.get("FAOR_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise BadInput(f"FAOR_SEED must be an integer, got {env!r}") from None


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _load_segmentation(path, shape) -> np.ndarray | None:
    if path is None:
        return None
    ids = fio.load_instance_map(path)
    if ids.shape != tuple(shape):
        raise BadInput(f"segmentation {ids.shape} does not match image {tuple(shape)}")
    return ids


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise BadInput(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith(SEG_SUFFIX))


def _segmentation_for(image_path: Path) -> Path | None:
    seg = image_path.with_name(image_path.stem + SEG_SUFFIX + ".png")
    return seg if seg.exists() else None


# -- commands ----------------------------------------------------------------------

def cmd_gen_priors(args) -> int:
    image = fio.load_image(args.input)
    grid = ErpGrid(image.shape[0], image.shape[1])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fio.save_distortion_map(distortion_map(grid), out / "m_d.png", out / "m_d.f32")
    seg = _load_segmentation(args.segmentation, grid.shape)
    if seg is None:
        log.warning("no --segmentation given; writing an all-zero instance map")
        seg = np.zeros(grid.shape, dtype=np.int64)
    fio.save_instance_map(seg, out / "m_s.png")
    outputs = [str(out / n) for n in ("m_d.png", "m_d.f32", "m_s.png")]
    fio.RunManifest(
        "gen-priors", inputs=[str(args.input)] + ([str(args.segmentation)] if args.segmentation else []),
        outputs=outputs, extra={"height": grid.height, "width": grid.width},
    ).write(out / "manifest.json")
    return EXIT_OK


def _upscale(image, scale, model: FAOR | None, resampler: str | None, seg=None, timings=None):
    grid = ErpGrid(image.shape[0], image.shape[1])
    if model is None:
        t0 = time.perf_counter()
        out = np.clip(resample(image, grid, hr_coordinate_grid(grid, scale), resampler or "bicubic"), 0, 1)
        if timings is not None:
            timings.update(encode_ms=0.0, resample_ms=1e3 * (time.perf_counter() - t0), sgif_ms=0.0)
        return out
    if resampler is not None:
        model.config.resampler = resampler
    return model.super_resolve(image, scale, PriorMaps.for_grid(grid, seg), timings)


def cmd_upscale(args) -> int:
    if args.scale <= 0:
        raise BadInput("--scale must be positive")
    image = fio.load_image(args.input)
    seg = _load_segmentation(args.segmentation, image.shape[:2])
    model = FAOR.load(args.checkpoint) if args.checkpoint else None
    timings = {}
    out = _upscale(image, args.scale, model, args.resampler, seg, timings)
    fio.save_image(out, args.out, bitdepth=args.bitdepth)
    extra = {"scale": args.scale, "output_shape": list(out.shape[:2]),
             "mode": "model" if model else f"resampler:{args.resampler or 'bicubic'}",
             "sgif_evaluations": model.sgif_evaluations if model else 0}
    if model is not None:
        extra["resampler"] = model.config.resampler
    fio.RunManifest("upscale", inputs=[str(args.input)], outputs=[str(args.out)],
                    timings_ms=timings, extra=extra).write(_manifest_path(Path(args.out)))
    return EXIT_OK


def load_dataset(data_dir) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Images of a directory plus optional ``<stem>_seg.png`` instance maps."""
    files = _image_files(Path(data_dir))
    if not files:
        raise BadInput(f"no images found in {data_dir}")
    data = []
    for f in files:
        img = fio.load_image(f).astype(np.float32)
        seg_path = _segmentation_for(f)
        data.append((img, _load_segmentation(seg_path, img.shape[:2]) if seg_path else None))
    return data


def cmd_train(args) -> int:
    values = fio.read_config(args.config) if args.config else {}
    try:
        model_cfg, train_cfg = fio.split_config(values)
    except (TypeError, ValueError) as exc:
        raise BadInput(f"bad config: {exc}") from exc
    train_cfg.seed = _seed(train_cfg.seed)
    dataset = load_dataset(args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = FAOR(model_cfg, seed=train_cfg.seed)
    t0 = time.perf_counter()
    try:
        result = train_loop(dataset, model, train_cfg,
                            checkpoint_dir=out if train_cfg.checkpoint_every else None)
    except ValueError as exc:
        raise BadInput(str(exc)) from exc
    elapsed = 1e3 * (time.perf_counter() - t0)
    model.save(out / "model.faor")
    with open(out / "loss.csv", "w") as fh:
        fh.write("iteration,lr,loss\n")
        for it, lr, loss in result.history:
            fh.write(f"{it},{lr:.9g},{loss:.9g}\n")
    losses = result.losses
    fio.RunManifest(
        "train", config_path=str(args.config) if args.config else None,
        inputs=[str(args.data_dir)], outputs=[str(out / "model.faor"), str(out / "loss.csv")],
        seed=train_cfg.seed, timings_ms={"train_ms": elapsed},
        extra={"iterations": len(losses), "first_loss": float(losses[0]),
               "final_loss": float(losses[-1]), "model": model_cfg.to_dict()},
    ).write(out / "manifest.json")
    log.info("trained %d iterations, loss %.5f -> %.5f", len(losses), losses[0], losses[-1])
    return EXIT_OK


def _pair_files(directory: Path):
    files = _image_files(directory)
    by_stem = {f.stem: f for f in files}
    pairs = []
    for stem, f in sorted(by_stem.items()):
        if stem.endswith("_sr"):
            name = stem[:-3]
            hr = by_stem.get(name + "_hr")
            if hr is None:
                raise BadInput(f"{f.name} has no matching {name}_hr file")
            pairs.append((name, f, hr))
    if not pairs:
        raise BadInput(f"no <name>_sr / <name>_hr pairs in {directory}")
    return pairs


def cmd_eval(args) -> int:
    report = MetricReport()
    inputs = []
    if args.pairs:
        for name, sr_path, hr_path in _pair_files(Path(args.pairs)):
            report.add(name, evaluate_pair(fio.load_image(sr_path), fio.load_image(hr_path), args.channel))
            inputs += [str(sr_path), str(hr_path)]
    else:
        if args.hr_dir is None or args.scale is None:
            raise BadInput("eval needs --pairs DIR or --hr-dir DIR with --scale")
        model = FAOR.load(args.checkpoint) if args.checkpoint else None
        for f in _image_files(Path(args.hr_dir)):
            hr = fio.load_image(f)
            grid = ErpGrid(hr.shape[0], hr.shape[1])
            lr = resample(hr, grid, hr_coordinate_grid(grid, 1.0 / args.scale), "bicubic")
            seg_path = _segmentation_for(f)
            seg = None
            if seg_path is not None and model is not None:
                seg = _nearest_shrink(_load_segmentation(seg_path, hr.shape[:2]), lr.shape[:2])
            sr = _upscale(lr, args.scale, model, args.resampler, seg)
            if sr.shape != hr.shape:
                raise BadInput(f"{f.name}: scale {args.scale} maps {hr.shape[:2]} to "
                               f"{lr.shape[:2]} and back to {sr.shape[:2]}")
            report.add(f.stem, evaluate_pair(sr, hr, args.channel))
            inputs.append(str(f))
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        fio.RunManifest("eval", inputs=inputs, outputs=[str(out / "metrics.csv")],
                        extra={"channel": args.channel, "scale": args.scale,
                               "checkpoint": args.checkpoint, "mean": report.mean()}
                        ).write(out / "manifest.json")
    return EXIT_OK


def _nearest_shrink(ids: np.ndarray, shape) -> np.ndarray:
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * ids.shape[0] / shape[0]).astype(int), ids.shape[0] - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * ids.shape[1] / shape[1]).astype(int), ids.shape[1] - 1)
    return ids[rows][:, cols]


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise BadInput("--repeat must be >= 1")
    image = fio.load_image(args.input)
    model = FAOR.load(args.checkpoint) if args.checkpoint else FAOR(ModelConfig(), seed=_seed(0) or 0)
    samples = []
    for _ in range(args.repeat):
        timings = {}
        t0 = time.perf_counter()
        out = model.super_resolve(image, args.scale, PriorMaps.for_grid(ErpGrid(*image.shape[:2])), timings)
        timings["total_ms"] = 1e3 * (time.perf_counter() - t0)
        samples.append(timings)
    median = {k: statistics.median(s[k] for s in samples) for k in samples[0]}
    megapixels = out.shape[0] * out.shape[1] / 1e6
    throughput = megapixels / (median["total_ms"] / 1e3)
    print(f"output {out.shape[1]}x{out.shape[0]} ({megapixels:.3f} MP), {args.repeat} runs")
    for k in ("encode_ms", "resample_ms", "sgif_ms", "total_ms"):
        vals = ", ".join(f"{s[k]:.1f}" for s in samples)
        print(f"{k:<12} median {median[k]:9.2f}  samples [{vals}]")
    print(f"throughput   {throughput:.3f} MP/s")
    if args.out:
        fio.RunManifest("bench", inputs=[str(args.input)], timings_ms=median,
                        extra={"scale": args.scale, "repeat": args.repeat, "samples": samples,
                               "megapixels": megapixels, "mp_per_s": throughput}
                        ).write(Path(args.out))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args.seed)
    written = []
    for i in range(args.count):
        img, ids = synthetic_odi(args.height, args.width, seed + i)
        name = out / f"synth{i:03d}.png"
        fio.save_image(img, name, bitdepth=16)
        fio.save_instance_map(ids, out / f"synth{i:03d}{SEG_SUFFIX}.png")
        written.append(str(name))
    fio.RunManifest("synth", outputs=written, seed=seed,
                    extra={"height": args.height, "width": args.width}).write(out / "manifest.json")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-priors", help="write stretching-ratio and instance prior maps")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--segmentation", help="16-bit PNG of instance ids (0 = background)")
    p.set_defaults(func=cmd_gen_priors)

    p = sub.add_parser("upscale", help="super-resolve one ERP image")
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--checkpoint", help="trained model; omit to run a pure resampler")
    p.add_argument("--resampler", choices=RESAMPLERS)
    p.add_argument("--segmentation")
    p.add_argument("--bitdepth", type=int, choices=(8, 16), default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("train", help="train a model on a directory of ERP images")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="WS-PSNR / WS-SSIM over image pairs")
    p.add_argument("--pairs", help="directory of <name>_sr / <name>_hr images")
    p.add_argument("--hr-dir", help="directory of HR images to downsample and restore")
    p.add_argument("--scale", type=float)
    p.add_argument("--checkpoint")
    p.add_argument("--resampler", choices=RESAMPLERS)
    p.add_argument("--channel", choices=("y", "rgb"), default="y")
    p.add_argument("--out", help="directory for metrics.csv and the manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the inference stages")
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="path of the JSON manifest")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write procedural panoramas with instance maps")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (BadInput, fio.ImageFormatError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())

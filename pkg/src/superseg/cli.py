"""Command-line entry point.

Run directory written by ``segment``::

    labels.pgm        superpixel ids, 16-bit binary PGM, original grid
    labels.csv        the same ids as CSV
    ih_ch<k>.png      superpixel image of channel k
    overlay.png       channel 0 with superpixel borders in white
    loss.csv          iteration,J,data,boundary,clust,cc
    metrics.txt       realized count, size stats, variance fractions
    config.resolved   every option actually used, key = value
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .labeling import LabelMap, enforce_min_size_merge, label_components
from .loss import LossOptions, LossWeights
from .pipeline import (
    RasterStack,
    TrainConfig,
    TrainingDiverged,
    compute_metrics,
    default_min_size,
    format_metrics,
    postprocess,
    preprocess,
    render_superpixel_image,
    resize_labels_nearest,
    toy_dataset,
    train_segment,
    write_loss_csv,
)
from .raster_io import RasterFormatError, read_label_map, read_raster_stack, write_image, write_label_map, write_raster_stack
from .slic import SlicConfig, slic_segment

log = logging.getLogger("superseg")

# option name -> (type, default); None default means "derived"
SEGMENT_OPTIONS = {
    "n": (int, 35),
    "iters": (int, 500),
    "lr": (float, 1e-2),
    "c1": (float, 1.0),
    "c2": (float, 1e-4),
    "c3": (float, 100.0),
    "c4": (float, 50.0),
    "lambda": (float, 2.0),
    "seed": (int, None),
    "min_size": (int, None),
    "quantile_channels": (str, ""),
    "connectivity": (int, 4),
    "depth": (int, 4),
    "base": (int, 64),
    "rcc_reduction": (str, "mean"),
    "detach_means": (bool, False),
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _coerce(key: str, raw, typ):
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"option {key}: cannot parse {raw!r} as {typ.__name__}")


def resolve_options(args: argparse.Namespace, table: dict) -> dict:
    """Defaults, then config file, then command-line flags."""
    resolved = {k: d for k, (_, d) in table.items()}
    if getattr(args, "config", None):
        for key, val in read_config_file(args.config).items():
            if key not in table:
                raise UsageError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, val, table[key][0])
    for key, (typ, _) in table.items():
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = _coerce(key, val, typ)
    if getattr(args, "no_rcc", False):
        resolved["c4"] = 0.0
    if resolved.get("seed") is None:
        raise UsageError("a seed is required (--seed or 'seed = ...' in the config file)")
    return resolved


def write_resolved(resolved: dict, path) -> None:
    with open(path, "w") as fh:
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")


def _load_input(paths) -> RasterStack:
    return read_raster_stack(paths if len(paths) > 1 else paths[0])


def _fill_missing(data: np.ndarray) -> np.ndarray:
    out = data.copy()
    for ch in out:
        bad = ~np.isfinite(ch)
        if bad.any():
            ch[bad] = ch[~bad].mean() if (~bad).any() else 0.0
    return out


def _to_source_grid(labels: LabelMap, shape, min_size: int, connectivity: int) -> LabelMap:
    if labels.shape == tuple(shape):
        return labels
    resampled = resize_labels_nearest(labels.labels, shape)
    return enforce_min_size_merge(label_components(resampled, connectivity), min_size)


def _write_outputs(out: Path, raw: RasterStack, labels: LabelMap, target: int) -> dict:
    data = _fill_missing(raw.data)
    write_label_map(labels, out / "labels.pgm", "pgm16")
    write_label_map(labels, out / "labels.csv", "csv")
    rendered = render_superpixel_image(data, labels)
    for i, ch in enumerate(rendered):
        write_image(ch, out / f"ih_ch{i}.png")
    write_image(data[0], out / "overlay.png", boundaries=labels.labels)
    metrics = compute_metrics(data, labels, target)
    (out / "metrics.txt").write_text(format_metrics(metrics))
    return metrics


def _quantile_list(text: str) -> list:
    items = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        items.append(int(tok) if tok.lstrip("-").isdigit() else tok)
    return items


def cmd_toy(args) -> int:
    stack = toy_dataset(args.size, args.seed)
    write_raster_stack(stack, args.out)
    print(f"wrote {args.out} ({args.size}x{args.size})")
    return 0


def cmd_segment(args) -> int:
    opts = resolve_options(args, SEGMENT_OPTIONS)
    raw = _load_input(args.inputs)
    try:
        quantile = _quantile_list(opts["quantile_channels"])
        prepared = preprocess(raw, quantile_channels=quantile, multiple=max(16, 2 ** opts["depth"]))
    except ValueError as err:
        raise UsageError(str(err))
    config = TrainConfig(
        n_segments=opts["n"],
        weights=LossWeights(opts["c1"], opts["c2"], opts["c3"], opts["c4"], opts["lambda"]),
        iters=opts["iters"],
        lr=opts["lr"],
        seed=opts["seed"],
        depth=opts["depth"],
        base_channels=opts["base"],
        min_size=opts["min_size"],
        connectivity=opts["connectivity"],
        loss_options=LossOptions(detach_means=opts["detach_means"], rcc_reduction=opts["rcc_reduction"],
                                 connectivity=opts["connectivity"]),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(opts, inputs=",".join(str(p) for p in args.inputs))
    resolved["min_size"] = config.min_size if config.min_size is not None else default_min_size(prepared.shape, config.n_segments)
    write_resolved(resolved, out / "config.resolved")

    result = train_segment(prepared, config)
    write_loss_csv(result.history, out / "loss.csv")
    src_min = default_min_size(raw.shape, config.n_segments) if opts["min_size"] is None else opts["min_size"]
    labels = _to_source_grid(result.superpixels, raw.shape, src_min, config.connectivity)
    metrics = _write_outputs(out, raw, labels, config.n_segments)
    print(f"superpixels: target {config.n_segments}, realized {metrics['realized']} "
          f"(components before postprocess: {result.components_before})")
    return 0


SLIC_OPTIONS = {
    "k": (int, 35),
    "compactness": (float, 0.5),
    "iters": (int, 10),
    "min_size": (int, None),
    "quantile_channels": (str, ""),
    "connectivity": (int, 4),
    "seed": (int, 0),
}


def cmd_slic(args) -> int:
    opts = resolve_options(args, SLIC_OPTIONS)
    raw = _load_input(args.inputs)
    prepared = preprocess(raw, quantile_channels=_quantile_list(opts["quantile_channels"]), resize=False)
    try:
        labels = slic_segment(prepared, SlicConfig(opts["k"], opts["compactness"], opts["iters"],
                                                   opts["min_size"], opts["connectivity"]))
    except ValueError as err:
        raise UsageError(str(err))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(dict(opts, inputs=",".join(str(p) for p in args.inputs)), out / "config.resolved")
    metrics = _write_outputs(out, raw, labels, opts["k"])
    print(f"slic superpixels: target {opts['k']}, realized {metrics['realized']}")
    return 0


def cmd_stats(args) -> int:
    raw = _load_input(args.inputs)
    labels = read_label_map(args.labels)
    if labels.shape != raw.shape:
        raise UsageError(f"label map is {labels.shape}, raster is {raw.shape}")
    labels = LabelMap.from_array(labels.labels)
    print(format_metrics(compute_metrics(_fill_missing(raw.data), labels, args.n)), end="")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.suite(seed=args.seed)
    results["unet"] = gradcheck.unet_check(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:20s} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    return 0 if worst < gradcheck.TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superseg", description="Superpixel segmentation of multi-channel rasters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="write a circle-and-square toy raster")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("segment", help="train the network and write superpixels")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="one RSK1 file or per-channel CSV grids")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    for k in ("c1", "c2", "c3", "c4"):
        p.add_argument(f"--{k}", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-size", dest="min_size", type=int)
    p.add_argument("--quantile-channels", dest="quantile_channels")
    p.add_argument("--no-rcc", dest="no_rcc", action="store_true", help="same as --c4 0")
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--depth", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--rcc-reduction", dest="rcc_reduction", choices=("mean", "sum"))
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("slic", help="SLIC baseline superpixels")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--compactness", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-size", dest="min_size", type=int)
    p.add_argument("--quantile-channels", dest="quantile_channels")
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.set_defaults(func=cmd_slic)

    p = sub.add_parser("stats", help="metrics for an existing label map")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss term")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    threads = os.environ.get("SUPERSEG_THREADS")
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, RasterFormatError, TrainingDiverged, ValueError, OSError) as err:
        print(f"superseg: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Preprocessing, single-shot training, postprocessing and reporting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special, stats

from . import tensor as T
from .labeling import LabelMap, enforce_min_size_merge, label_components
from .loss import LossOptions, LossWeights, SegmentStats, argmax_channels, total_loss
from .optim import Adam
from .unet import UNet, UNetConfig

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "J", "data", "boundary", "clust", "cc")


@dataclass
class RasterStack:
    data: np.ndarray  # C x H x W, NaN marks missing cells
    names: list[str] = field(default_factory=list)
    cell_size: float = 1.0
    source_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ValueError(f"raster must be C x H x W, got shape {self.data.shape}")
        if not self.names:
            self.names = [f"ch{i}" for i in range(self.data.shape[0])]
        if len(self.names) != self.data.shape[0]:
            raise ValueError("one name per channel required")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass
class TrainConfig:
    n_segments: int = 35
    weights: LossWeights = field(default_factory=LossWeights)
    iters: int = 500
    lr: float = 1e-2
    seed: int = 0
    depth: int = 4
    base_channels: int = 64
    min_size: int | None = None
    connectivity: int = 4
    loss_options: LossOptions = field(default_factory=LossOptions)


@dataclass
class SegmentationResult:
    segmentation: np.ndarray  # argmax class per pixel, before connectivity
    superpixels: LabelMap
    stats: SegmentStats
    history: list[dict]
    rendered: np.ndarray
    components_before: int
    min_size: int
    network: UNet | None = None

    @property
    def realized_count(self) -> int:
        return self.superpixels.num_labels


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = terms
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {detail}")


# -------------------------------------------------------------- preprocessing


def nearest_multiple(n: int, multiple: int = 16) -> int:
    """Closest multiple of ``multiple`` to ``n`` (halfway rounds up, never below one step)."""
    return max(multiple, int(math.floor(n / multiple + 0.5)) * multiple)


def quantile_normalize(values: np.ndarray) -> np.ndarray:
    """Rank-based inverse normal transform; ties share their average rank."""
    flat = values.ravel()
    ranks = stats.rankdata(flat, method="average") - 1.0
    return special.ndtri((ranks + 0.5) / flat.size).reshape(values.shape)


def standardize(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    if not np.isfinite(sd) or sd == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def resize_bilinear(channel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = channel.shape
    nh, nw = shape
    if (h, w) == (nh, nw):
        return channel.copy()
    ys = (np.arange(nh) + 0.5) * h / nh - 0.5
    xs = (np.arange(nw) + 0.5) * w / nw - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(channel, [yy, xx], order=1, mode="nearest")


def resize_labels_nearest(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape
    nh, nw = shape
    rows = np.minimum((np.arange(nh) + 0.5) * h / nh, h - 1).astype(int)
    cols = np.minimum((np.arange(nw) + 0.5) * w / nw, w - 1).astype(int)
    return labels[np.ix_(rows, cols)]


def preprocess(
    raw: RasterStack,
    quantile_channels=(),
    multiple: int = 16,
    resize: bool = True,
) -> RasterStack:
    """Fill gaps, optionally quantile-normalize, standardize and resize.

    Missing cells take their channel mean. Channels listed in
    ``quantile_channels`` (indices or names) go through the inverse normal
    transform first. Every channel then gets zero mean and unit variance,
    and both spatial extents snap to the nearest multiple of ``multiple``.
    """
    data = np.asarray(raw.data, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty raster")
    wanted = set()
    for q in quantile_channels:
        wanted.add(raw.names.index(q) if isinstance(q, str) else int(q))
    out = []
    for i, ch in enumerate(data):
        ch = ch.copy()
        missing = ~np.isfinite(ch)
        if missing.all():
            ch[:] = 0.0
        elif missing.any():
            ch[missing] = ch[~missing].mean()
        if i in wanted:
            ch = quantile_normalize(ch)
        out.append(standardize(ch))
    h, w = raw.shape
    target = (nearest_multiple(h, multiple), nearest_multiple(w, multiple)) if resize else (h, w)
    out = [resize_bilinear(ch, target) for ch in out]
    return RasterStack(np.stack(out), list(raw.names), raw.cell_size, source_shape=(h, w))


# -------------------------------------------------------------- synthetic data


def toy_dataset(size: int = 64, seed: int = 0) -> RasterStack:
    """Zero background with one filled circle and one filled square of value 1.

    Circle radius is drawn from [size/10, size/6], square side from
    [size/6, size/4]; both shapes sit at least two pixels from the border and
    from each other.
    """
    if size < 16:
        raise ValueError("toy raster needs size >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    gap = 2
    for _ in range(10_000):
        r = rng.uniform(size / 10, size / 6)
        side = int(round(rng.uniform(size / 6, size / 4)))
        cy, cx = rng.uniform(r + gap, size - 1 - r - gap, size=2)
        sy, sx = rng.integers(gap, size - side - gap + 1, size=2)
        circle = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        square = (yy >= sy) & (yy < sy + side) & (xx >= sx) & (xx < sx + side)
        grown = ndimage.binary_dilation(circle, iterations=gap)
        if not (grown & square).any():
            img = (circle | square).astype(np.float64)
            return RasterStack(img[None], ["toy"])
    raise RuntimeError("could not place non-overlapping shapes")


def multi_blob_dataset(size: int = 128, n_blobs: int = 24, seed: int = 0, noise: float = 0.02) -> RasterStack:
    """Piecewise-constant field of overlapping discs and rectangles.

    Blob values come from a small palette so distant blobs share a value,
    which is what lets a segmentation assign them to one class.
    """
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    palette = np.array([-1.5, -0.5, 0.5, 1.5, 2.5])
    for _ in range(n_blobs):
        val = palette[rng.integers(len(palette))]
        cy, cx = rng.uniform(0, size, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(size / 20, size / 8)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh, ww = rng.uniform(size / 16, size / 5, size=2)
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
        img[mask] = val
    img += noise * rng.standard_normal(img.shape)
    return RasterStack(img[None], ["blobs"])


# ------------------------------------------------------------------- training


def default_min_size(shape: tuple[int, int], n_segments: int) -> int:
    return max(1, (shape[0] * shape[1]) // (4 * n_segments))


def postprocess(segmentation, min_size: int = 1, connectivity: int = 4) -> LabelMap:
    """Split classes into connected superpixels, then merge the undersized ones."""
    comps = label_components(segmentation, connectivity)
    return enforce_min_size_merge(comps, min_size)


def train_segment(image: RasterStack, config: TrainConfig, keep_network: bool = False) -> SegmentationResult:
    """Fit a fresh network to ``image`` and return its superpixel segmentation."""
    cfg = config
    c, h, w = image.data.shape
    net = UNet(UNetConfig(c, cfg.n_segments, cfg.depth, cfg.base_channels), seed=cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    x = T.Tensor(image.data)
    opts = cfg.loss_options
    if opts.connectivity != cfg.connectivity:
        opts = LossOptions(opts.detach_means, opts.rcc_reduction, opts.squared_weighting, cfg.connectivity)
    history: list[dict] = []
    for it in range(cfg.iters):
        with T.Tape() as tape:
            logits = net(x)
            out = total_loss(x, logits, cfg.weights, opts)
        terms = out.terms
        if not all(math.isfinite(terms[k]) for k in ("total", "data", "boundary", "clust", "cc")):
            raise TrainingDiverged(it, terms)
        history.append({"iteration": it, "J": terms["total"], "data": terms["data"],
                        "boundary": terms["boundary"], "clust": terms["clust"], "cc": terms["cc"],
                        "components": terms["components"]})
        tape.backward(out.total)
        opt.step()
        opt.zero_grad()
        if it % 50 == 0:
            logger.debug("iter %d J=%.6g components=%d", it, terms["total"], terms["components"])

    logits = net(x)
    final = total_loss(x, logits, cfg.weights, opts)
    seg = argmax_channels(logits)
    min_size = cfg.min_size if cfg.min_size is not None else default_min_size((h, w), cfg.n_segments)
    sp = postprocess(seg, min_size, cfg.connectivity)
    return SegmentationResult(
        segmentation=seg,
        superpixels=sp,
        stats=final.stats,
        history=history,
        rendered=render_superpixel_image(image.data, sp),
        components_before=int(final.terms["components"]),
        min_size=min_size,
        network=net if keep_network else None,
    )


# ------------------------------------------------------------------ reporting


def render_superpixel_image(image: np.ndarray, superpixels: LabelMap) -> np.ndarray:
    """Paint every superpixel with its per-channel mean."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    labels = superpixels.labels.ravel()
    if img.shape[1:] != superpixels.shape:
        raise ValueError(f"image {img.shape} and labels {superpixels.shape} differ in size")
    k = superpixels.num_labels
    counts = np.bincount(labels, minlength=k).astype(float)
    # average deviations from one member pixel, so constant regions come back bit-exact
    first = np.zeros(k, dtype=np.int64)
    present, idx = np.unique(labels, return_index=True)
    first[present] = idx
    out = np.empty_like(img)
    for ci, ch in enumerate(img):
        flat = ch.ravel()
        ref = flat[first]
        dev = np.bincount(labels, weights=flat - ref[labels], minlength=k)
        out[ci] = (ref + dev / np.maximum(counts, 1))[labels].reshape(ch.shape)
    return out


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """True where any 4-neighbour carries a different label."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    dy = lab[1:, :] != lab[:-1, :]
    dx = lab[:, 1:] != lab[:, :-1]
    edge[1:, :] |= dy
    edge[:-1, :] |= dy
    edge[:, 1:] |= dx
    edge[:, :-1] |= dx
    return edge


def compute_metrics(image, superpixels: LabelMap, target: int | None = None) -> dict:
    img = np.asarray(image.data if isinstance(image, RasterStack) else image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    sizes = superpixels.sizes()
    rendered = render_superpixel_image(img, superpixels)
    within = ((img - rendered) ** 2).reshape(img.shape[0], -1).mean(axis=1)
    total = img.reshape(img.shape[0], -1).var(axis=1)
    frac = np.where(total > 0, within / np.where(total > 0, total, 1.0), 0.0)
    return {
        "target": target,
        "realized": int(superpixels.num_labels),
        "size_min": int(sizes.min()) if sizes.size else 0,
        "size_mean": float(sizes.mean()) if sizes.size else 0.0,
        "size_max": int(sizes.max()) if sizes.size else 0,
        "within_variance": within.tolist(),
        "variance_fraction": frac.tolist(),
        "boundary_pixels": int(boundary_mask(superpixels.labels).sum()),
    }


def format_metrics(metrics: dict) -> str:
    lines = []
    for key, val in metrics.items():
        if isinstance(val, list):
            val = " ".join(f"{v:.6g}" for v in val)
        lines.append(f"{key}: {val}")
    return "\n".join(lines) + "\n"


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for row in history:
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])

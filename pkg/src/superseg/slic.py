"""SLIC superpixels on standardized multi-channel rasters (no colour conversion)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .labeling import LabelMap


@dataclass
class SlicConfig:
    k: int
    compactness: float = 0.5
    iterations: int = 10
    min_size: int | None = None
    connectivity: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")


@dataclass
class SlicState:
    labels: np.ndarray  # H x W cluster ids
    centers_xy: np.ndarray  # K x 2 (row, col)
    centers_val: np.ndarray  # K x C
    costs: list[float]


def _grid_centers(h: int, w: int, k: int) -> np.ndarray:
    step = math.sqrt(h * w / k)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    while ny * nx > k:
        if ny >= nx and ny > 1:
            ny -= 1
        else:
            nx -= 1
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def _sq_dist(img, yy, xx, cy, cx, cval, spatial_w2):
    dv = ((img - cval[:, None, None]) ** 2).sum(axis=0)
    return dv + spatial_w2 * ((yy - cy) ** 2 + (xx - cx) ** 2)


def total_cost(image: np.ndarray, state: SlicState, step: float, compactness: float) -> float:
    """Sum over pixels of the squared joint distance to the assigned center."""
    h, w = state.labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    lab = state.labels
    cv = state.centers_val[lab]  # H x W x C
    dv = ((np.moveaxis(image, 0, -1) - cv) ** 2).sum(axis=-1)
    cxy = state.centers_xy[lab]
    ds = (yy - cxy[..., 0]) ** 2 + (xx - cxy[..., 1]) ** 2
    return float((dv + (compactness / step) ** 2 * ds).sum())


def slic_iterate(image: np.ndarray, config: SlicConfig) -> SlicState:
    """Localized k-means in (position, value) space; returns raw cluster labels.

    The distance is ``|dv|^2 + (m/S)^2 |dxy|^2``. Each pixel compares the
    centers whose 2S x 2S window covers it, plus its current center, so an
    assignment never increases the total cost and the mean update never does
    either.
    """
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    if config.k > h * w:
        raise ValueError(f"k={config.k} exceeds the pixel count {h * w}")
    step = math.sqrt(h * w / config.k)
    sw2 = (config.compactness / step) ** 2
    centers_xy = _grid_centers(h, w, config.k)
    iy = np.clip(centers_xy[:, 0].astype(int), 0, h - 1)
    ix = np.clip(centers_xy[:, 1].astype(int), 0, w - 1)
    centers_val = img[:, iy, ix].T.copy()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # initial assignment: nearest center in the joint metric over the full grid
    best = np.full((h, w), np.inf)
    labels = np.zeros((h, w), dtype=np.int64)
    for j, ((cy, cx), cval) in enumerate(zip(centers_xy, centers_val)):
        d = _sq_dist(img, yy, xx, cy, cx, cval, sw2)
        upd = d < best
        best[upd] = d[upd]
        labels[upd] = j
    state = SlicState(labels, centers_xy, centers_val, [])
    state.centers_xy, state.centers_val = _update_centers(img, labels, centers_xy, centers_val)
    state.costs.append(total_cost(img, state, step, config.compactness))

    radius = int(math.ceil(step))
    for _ in range(config.iterations):
        cxy, cval = state.centers_xy, state.centers_val
        # current-center distance seeds the comparison
        best = _sq_dist_assigned(img, yy, xx, state.labels, cxy, cval, sw2)
        labels = state.labels.copy()
        for j in range(len(cxy)):
            cy, cx = cxy[j]
            y0, y1 = max(int(cy) - radius, 0), min(int(cy) + radius + 1, h)
            x0, x1 = max(int(cx) - radius, 0), min(int(cx) + radius + 1, w)
            d = _sq_dist(img[:, y0:y1, x0:x1], yy[y0:y1, x0:x1], xx[y0:y1, x0:x1], cy, cx, cval[j], sw2)
            win_best = best[y0:y1, x0:x1]
            upd = d < win_best
            win_best[upd] = d[upd]
            labels[y0:y1, x0:x1][upd] = j
        state.labels = labels
        state.centers_xy, state.centers_val = _update_centers(img, labels, cxy, cval)
        state.costs.append(total_cost(img, state, step, config.compactness))
    return state


def _sq_dist_assigned(img, yy, xx, labels, cxy, cval, sw2):
    cv = cval[labels]
    dv = ((np.moveaxis(img, 0, -1) - cv) ** 2).sum(axis=-1)
    c = cxy[labels]
    return dv + sw2 * ((yy - c[..., 0]) ** 2 + (xx - c[..., 1]) ** 2)


def _update_centers(img, labels, cxy, cval):
    k = len(cxy)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(float)
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    new_xy = cxy.copy()
    new_val = cval.copy()
    live = counts > 0
    for axis, coord in enumerate((yy, xx)):
        s = np.bincount(flat, weights=coord.ravel(), minlength=k)
        new_xy[live, axis] = s[live] / counts[live]
    for ci in range(img.shape[0]):
        s = np.bincount(flat, weights=img[ci].ravel(), minlength=k)
        new_val[live, ci] = s[live] / counts[live]
    return new_xy, new_val


def slic_segment(image, config: SlicConfig) -> LabelMap:
    """SLIC followed by the same connectivity postprocess as the main pipeline."""
    from .pipeline import default_min_size, postprocess

    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    state = slic_iterate(data, config)
    min_size = config.min_size if config.min_size is not None else default_min_size(data.shape[1:], config.k)
    return postprocess(state.labels, min_size, config.connectivity)

"""Differentiable network layers and per-pixel probability maps.

All image tensors are channel-major ``C x H x W`` with no batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, record


@dataclass
class ConvKernel:
    """3x3 kernel, stride 1, zero padding 1."""

    weight: Tensor  # out_ch x in_ch x 3 x 3
    bias: Tensor  # out_ch

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def _padded_flat(x: np.ndarray) -> np.ndarray:
    """Zero-pad by one pixel (plus one spare row) and flatten the grid.

    On this layout every 3x3 tap is a contiguous slice of length ``H*(W+2)``;
    the two extra columns per row are junk and get cropped.
    """
    c, h, w = x.shape
    xp = np.zeros((c, h + 3, w + 2), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1] = x
    return xp.reshape(c, -1)


def _tap_offsets(w: int) -> list[int]:
    return [dy * (w + 2) + dx for dy in range(3) for dx in range(3)]


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Same-size 3x3 cross-correlation."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    if c != kernel.in_channels:
        raise ValueError(
            f"conv2d: input has {c} channels, kernel expects {kernel.in_channels}"
        )
    wt, b = kernel.weight, kernel.bias
    o = kernel.out_channels
    span = h * (w + 2)
    offs = _tap_offsets(w)
    xf = _padded_flat(x.data)
    # rows ordered (tap, out_ch)
    wk = wt.data.transpose(2, 3, 0, 1).reshape(9 * o, c)
    per_tap = (wk @ xf).reshape(9, o, -1)
    acc = np.zeros((o, span), dtype=x.data.dtype)
    for k, off in enumerate(offs):
        acc += per_tap[k, :, off:off + span]
    out = acc.reshape(o, h, w + 2)[:, :, :w] + b.data[:, None, None]

    def back(g):
        ge = np.zeros((o, h, w + 2), dtype=g.dtype)
        ge[:, :, :w] = g
        ge = ge.reshape(o, span)
        gx = gw = gb = None
        if x.requires_grad:
            wkt = wt.data.transpose(2, 3, 1, 0).reshape(9 * c, o)
            per_tap_g = (wkt @ ge).reshape(9, c, span)
            gxf = np.zeros_like(xf)
            for k, off in enumerate(offs):
                gxf[:, off:off + span] += per_tap_g[k]
            gx = gxf.reshape(c, h + 3, w + 2)[:, 1:h + 1, 1:w + 1]
        if wt.requires_grad:
            cols = np.stack([xf[:, off:off + span] for off in offs])  # 9 x C x span
            gw = (ge @ cols.transpose(2, 0, 1).reshape(span, 9 * c)).reshape(o, 3, 3, c)
            gw = gw.transpose(0, 3, 1, 2)
        if b.requires_grad:
            gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    return record("conv2d", [x, wt, b], out, back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first cell in row-major order."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        return (gb.reshape(c, h, w),)

    return record("maxpool2", [x], out, back)


def upsample_nearest2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return record("upsample_nearest2", [x], out, back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record("relu", [x], np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over H x W with a learnable affine map."""
    c, h, w = x.shape
    n = h * w
    if n < 1:
        raise ValueError("instance_norm needs at least one pixel")
    xf = x.data.reshape(c, n)
    mu = xf.mean(axis=1, keepdims=True)
    xc = xf - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[:, None]
    out = (xhat * gd + beta.data[:, None]).reshape(c, h, w)

    def back(g):
        g2 = g.reshape(c, n)
        ggam = (g2 * xhat).sum(axis=1)
        gbet = g2.sum(axis=1)
        gxhat = g2 * gd
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx.reshape(c, h, w), ggam, gbet

    return record("instance_norm", [x, gamma, beta], out, back)


def softmax_channels(f: Tensor) -> Tensor:
    """Softmax over axis 0 at every pixel."""
    z = f.data - f.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return record("softmax", [f], p, back)


def sparsemax_threshold(z: np.ndarray) -> np.ndarray:
    """Simplex-projection threshold along the last axis (sort-based)."""
    zs = -np.sort(-z, axis=-1)
    k = np.arange(1, z.shape[-1] + 1, dtype=z.dtype)
    csum = np.cumsum(zs, axis=-1)
    support = 1.0 + k * zs > csum
    kz = support.sum(axis=-1, keepdims=True)
    ck = np.take_along_axis(csum, kz - 1, axis=-1)
    return (ck - 1.0) / kz


def sparsemax(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row (last axis) onto the probability simplex."""
    z = np.asarray(z, dtype=float)
    return np.maximum(z - sparsemax_threshold(z), 0.0)


def sparsemax_channels(f: Tensor) -> Tensor:
    """Sparsemax over axis 0 at every pixel."""
    z = np.moveaxis(f.data, 0, -1)
    p = np.moveaxis(np.maximum(z - sparsemax_threshold(z), 0.0), -1, 0)
    supp = p > 0
    count = supp.sum(axis=0, keepdims=True)

    def back(g):
        gs = g * supp
        return (supp * (g - gs.sum(axis=0, keepdims=True) / count),)

    return record("sparsemax", [f], np.ascontiguousarray(p), back)

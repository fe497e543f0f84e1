"""Superpixel objective: data fidelity, boundary length, clustering and
connected-component regularization.

Shapes: image ``C x H x W``, logits and probabilities ``N x H x W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .labeling import ComponentMasks, dominant_component_masks, label_components
from .nn import softmax_channels, sparsemax_channels
from .tensor import Tensor

MASS_FLOOR = 1e-8


@dataclass
class LossWeights:
    c1: float = 1.0
    c2: float = 1e-4
    c3: float = 100.0
    c4: float = 50.0
    lam: float = 2.0

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "c4", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossOptions:
    detach_means: bool = False
    rcc_reduction: str = "mean"  # "mean" or "sum"
    squared_weighting: bool = False
    connectivity: int = 4


@dataclass
class SegmentStats:
    means: np.ndarray  # N x C
    masses: np.ndarray  # N
    p_hat: np.ndarray  # N


@dataclass
class LossOutput:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    segmentation: np.ndarray | None = None
    masks: ComponentMasks | None = None
    stats: SegmentStats | None = None


def _image_tensor(image) -> Tensor:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=float)
    return Tensor(data)


def _flat(t: Tensor) -> Tensor:
    return T.reshape(t, (t.shape[0], -1))


def segment_means(image, ps: Tensor, detach: bool = False) -> tuple[Tensor, np.ndarray]:
    """Probability-weighted mean of every channel per segment.

    Returns the ``N x C`` means and a 0/1 vector marking segments whose mass
    exceeds the floor; means of massless segments are zero.
    """
    img = _image_tensor(image)
    if img.shape[1:] != ps.shape[1:]:
        raise ValueError(f"image {img.shape} and probabilities {ps.shape} differ in H x W")
    if detach:
        ps = Tensor(ps.data)
    n = ps.shape[0]
    c = img.shape[0]
    pf = _flat(ps)  # N x HW
    num = T.matmul(pf, T.transpose(_flat(img), (1, 0)))  # N x C
    mass = T.sum(pf, axes=1)  # N
    active = (mass.data > MASS_FLOOR).astype(float)
    safe = T.add(T.mul(mass, Tensor(active)), Tensor(1.0 - active))
    denom = T.broadcast_to(T.reshape(safe, (n, 1)), (n, c))
    means = T.mul(T.div(num, denom), Tensor(np.broadcast_to(active[:, None], (n, c)).copy()))
    return means, active


def data_term(image, ps: Tensor, means: Tensor, active=None, squared_weighting: bool = False) -> Tensor:
    """Sum over segments and pixels of ``|c_n - I_ij|^2 * Ps_nij``."""
    img = _image_tensor(image)
    n, c = means.shape
    hw = img.shape[1] * img.shape[2]
    resid = T.sub(
        T.broadcast_to(T.reshape(means, (n, c, 1)), (n, c, hw)),
        Tensor(np.broadcast_to(img.data.reshape(1, c, hw), (n, c, hw))),
    )
    sq = T.sum(T.square(resid), axes=1)  # N x HW
    weight = _flat(ps)
    if squared_weighting:
        weight = T.square(weight)
    if active is not None:
        weight = T.mul(weight, Tensor(np.broadcast_to(np.asarray(active, float)[:, None], (n, hw)).copy()))
    return T.sum(T.mul(sq, weight))


def boundary_term(ps: Tensor) -> Tensor:
    """Half the squared forward-difference gradient, zero past the last row/column."""
    total = None
    h, w = ps.shape[1], ps.shape[2]
    if h > 1:
        dy = T.sub(ps[:, 1:, :], ps[:, :-1, :])
        total = T.sum(T.square(dy))
    if w > 1:
        dx = T.sub(ps[:, :, 1:], ps[:, :, :-1])
        sx = T.sum(T.square(dx))
        total = sx if total is None else T.add(total, sx)
    if total is None:
        return T.scale(T.sum(ps), 0.0)
    return T.scale(total, 0.5)


def r_clust(p: Tensor, lam: float) -> Tensor:
    """Mean pixel entropy plus ``lam`` times the negative entropy of the class marginals."""
    n, h, w = p.shape
    hw = h * w
    ent = T.scale(T.sum(T.mul(p, T.log(p))), -1.0 / hw)
    p_hat = T.scale(T.sum(_flat(p), axes=1), 1.0 / hw)
    bal = T.sum(T.mul(p_hat, T.log(p_hat)))
    return T.add(ent, T.scale(bal, lam))


def r_cc(p: Tensor, masks: ComponentMasks, reduction: str = "mean") -> Tensor:
    """Push stray pieces of a class away and pull its dominant piece in.

    ``reduction="mean"`` averages over all ``N*H*W`` entries; ``"sum"`` sums.
    """
    repel = Tensor(masks.repel)
    attract = Tensor(masks.attract)
    body = T.sub(T.mul(repel, p), T.mul(attract, T.log(p)))
    if reduction == "mean":
        return T.mean(body)
    if reduction == "sum":
        return T.sum(body)
    raise ValueError(f"unknown reduction {reduction!r}")


def argmax_channels(logits) -> np.ndarray:
    """Per-pixel argmax over axis 0; ties go to the lowest channel."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=0).astype(np.int64)


def total_loss(
    image,
    logits: Tensor,
    weights: LossWeights,
    options: LossOptions | None = None,
) -> LossOutput:
    """Weighted objective with unweighted per-term diagnostics.

    Sparsemax probabilities feed the data and boundary terms, softmax
    probabilities the two regularizers.
    """
    opts = options or LossOptions()
    n = logits.shape[0]
    seg = argmax_channels(logits)
    zero = T.scale(T.sum(logits), 0.0)
    terms = {}
    total = zero
    ps = sparsemax_channels(logits)
    p = softmax_channels(logits)

    means, active = segment_means(image, ps, detach=opts.detach_means)
    d = data_term(image, ps, means, active, opts.squared_weighting)
    b = boundary_term(ps)
    rc = r_clust(p, weights.lam)
    cc = label_components(seg, opts.connectivity)
    masks = dominant_component_masks(seg, n, components=cc)
    rcc = r_cc(p, masks, opts.rcc_reduction)

    for name, term, c in (("data", d, weights.c1), ("boundary", b, weights.c2),
                          ("clust", rc, weights.c3), ("cc", rcc, weights.c4)):
        terms[name] = term.item()
        if c != 0:
            total = T.add(total, T.scale(term, c))
    terms["total"] = total.item()
    terms["components"] = cc.num_labels

    masses = ps.data.reshape(n, -1).sum(axis=1)
    hw = p.shape[1] * p.shape[2]
    stats = SegmentStats(means.data.copy(), masses, p.data.reshape(n, -1).sum(axis=1) / hw)
    return LossOutput(total, terms, seg, masks, stats)


def entropy_bounds(n: int, lam: float) -> tuple[float, float]:
    """Attainable range of :func:`r_clust` for ``n`` classes."""
    return -lam * math.log(n), math.log(n)

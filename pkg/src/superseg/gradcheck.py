"""Central finite-difference checks for every op and loss term.

The relative error reported for a check is
``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-12)`` over the whole gradient
vector (Euclidean norms), which stays meaningful when single entries are
near zero.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .labeling import dominant_component_masks
from .loss import LossWeights, boundary_term, data_term, r_cc, r_clust, segment_means, total_loss
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def tape_gradient(fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> list[np.ndarray]:
    params = [T.parameter(a.copy()) for a in arrays]
    with T.Tape() as tape:
        out = fn(*params)
    tape.backward(out)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def numeric_gradient(
    fn: Callable[..., Tensor], arrays: list[np.ndarray], step: float = STEP, max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Central differences of a scalar function; optionally on a random subset of entries.

    Returns the estimated gradients and, per input, a boolean mask of the
    entries that were actually probed.
    """
    rng = rng or np.random.default_rng(0)
    grads, probed = [], []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        mask = np.zeros(a.shape, dtype=bool)
        idx = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            idx = np.sort(rng.choice(a.size, max_entries, replace=False))
        for j in idx:
            pos = np.unravel_index(j, a.shape)
            vals = []
            for sgn in (1.0, -1.0):
                shifted = [x.copy() for x in arrays]
                shifted[i][pos] += sgn * step
                vals.append(fn(*[Tensor(x) for x in shifted]).item())
            g[pos] = (vals[0] - vals[1]) / (2 * step)
            mask[pos] = True
        grads.append(g)
        probed.append(mask)
    return grads, probed


def check(fn: Callable[..., Tensor], arrays: list[np.ndarray], max_entries: int | None = None,
          step: float = STEP, joint: bool = False) -> float:
    """Largest relative error over the inputs of ``fn``.

    With ``joint`` the probed entries of all inputs form one vector, for
    parameter sets where some tensors have an identically zero gradient.
    """
    analytic = tape_gradient(fn, arrays)
    numeric, probed = numeric_gradient(fn, arrays, step, max_entries)
    if joint:
        return relative_error(np.concatenate([a[m] for a, m in zip(analytic, probed)]),
                              np.concatenate([n[m] for n, m in zip(numeric, probed)]))
    return max(relative_error(a[m], n[m]) for a, n, m in zip(analytic, numeric, probed))


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(weights)))


# ------------------------------------------------------------ stable instances


def stable_logits(rng: np.random.Generator, n: int, h: int, w: int, margin: float = 1e-3) -> np.ndarray:
    """Random logits whose argmax and sparsemax support survive a perturbation of ``margin``."""
    for _ in range(1000):
        z = rng.normal(scale=1.0, size=(n, h, w))
        top2 = -np.sort(-z, axis=0)[:2]
        if (top2[0] - top2[1]).min() < margin:
            continue
        zz = np.moveaxis(z, 0, -1)
        tau = nn.sparsemax_threshold(zz)
        if np.abs(zz - tau).min() < margin:
            continue
        return z
    raise RuntimeError("no perturbation-stable instance found")


def suite(seed: int = 0, n: int = 3, c: int = 2, h: int = 8, w: int = 8) -> dict[str, float]:
    """Max relative error per op and loss term on random 64-bit instances."""
    rng = np.random.default_rng(seed)
    res: dict[str, float] = {}

    x = rng.normal(size=(c, h, w))
    R = rng.normal(size=(n, h, w))

    # tensor-core ops
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4))
    res["add"] = check(lambda p, q: _project(T.add(p, q), R[0, :3, :4]), [a, b])
    res["sub"] = check(lambda p, q: _project(T.sub(p, q), R[0, :3, :4]), [a, b])
    res["mul"] = check(lambda p, q: _project(T.mul(p, q), R[0, :3, :4]), [a, b])
    res["div"] = check(lambda p, q: _project(T.div(p, q), R[0, :3, :4]), [a, b])
    res["scale"] = check(lambda p: _project(T.scale(p, -2.5), R[0, :3, :4]), [a])
    res["neg"] = check(lambda p: _project(T.neg(p), R[0, :3, :4]), [a])
    res["log"] = check(lambda p: _project(T.log(p), R[0, :3, :4]), [a])
    res["square"] = check(lambda p: _project(T.square(p), R[0, :3, :4]), [a])
    res["exp"] = check(lambda p: _project(T.exp(p), R[0, :3, :4]), [a])
    res["clamp_min"] = check(lambda p: _project(T.clamp_min(p, 1.0), R[0, :3, :4]),
                             [np.where(np.abs(a - 1.0) < 0.05, a + 0.1, a)])
    res["sum"] = check(lambda p: _project(T.sum(p, axes=0), R[0, 0, :4]), [a])
    res["mean"] = check(lambda p: _project(T.mean(p, axes=1), R[0, 0, :3]), [a])
    res["matmul"] = check(lambda p, q: _project(T.matmul(p, T.transpose(q, (1, 0))), R[0, :3, :3]), [a, b])
    res["broadcast_to"] = check(lambda p: _project(T.broadcast_to(p, (3, 4)), R[0, :3, :4]), [a[:, :1]])
    res["getitem"] = check(lambda p: _project(p[:, 1:3], R[0, :3, :2]), [a])
    res["concat"] = check(lambda p, q: _project(T.concat([p, q], axis=0), R[0, :6, :4]), [a, b])

    # nn ops
    wt = rng.normal(scale=0.5, size=(n, c, 3, 3))
    bias = rng.normal(size=n)
    res["conv2d"] = check(lambda xx, ww, bb: _project(nn.conv2d(xx, nn.ConvKernel(ww, bb)), R),
                          [x, wt, bias])
    xr = np.where(np.abs(x) < 1e-2, 0.1, x)
    res["relu"] = check(lambda xx: _project(nn.relu(xx), R[:c]), [xr])
    xp = x + 0.01 * np.arange(x.size).reshape(x.shape)  # distinct values, so no pooling ties
    res["maxpool2"] = check(lambda xx: _project(nn.maxpool2(xx), R[:c, : h // 2, : w // 2]), [xp])
    res["upsample_nearest2"] = check(
        lambda xx: _project(nn.upsample_nearest2(xx), rng_fixed(seed, (c, 2 * h, 2 * w))), [x])
    gam = rng.uniform(0.5, 1.5, size=c)
    bet = rng.normal(size=c)
    res["instance_norm"] = check(lambda xx, g, bb: _project(nn.instance_norm(xx, g, bb), R[:c]), [x, gam, bet])
    z = stable_logits(rng, n, h, w)
    res["softmax"] = check(lambda zz: _project(nn.softmax_channels(zz), R), [z])
    res["sparsemax"] = check(lambda zz: _project(nn.sparsemax_channels(zz), R), [z])

    # loss terms, each as a function of the logits
    img = x
    seg = np.argmax(z, axis=0)
    masks = dominant_component_masks(seg, n)
    weights = LossWeights()

    def means_of(zz):
        return segment_means(img, nn.sparsemax_channels(zz))[0]

    res["segment_means"] = check(lambda zz: _project(means_of(zz), rng_fixed(seed, (n, c))), [z])

    def data_of(zz):
        ps = nn.sparsemax_channels(zz)
        m, act = segment_means(img, ps)
        return data_term(img, ps, m, act)

    res["data_term"] = check(data_of, [z])
    res["boundary_term"] = check(lambda zz: boundary_term(nn.sparsemax_channels(zz)), [z])
    res["r_clust"] = check(lambda zz: r_clust(nn.softmax_channels(zz), weights.lam), [z])
    res["r_cc"] = check(lambda zz: r_cc(nn.softmax_channels(zz), masks), [z])
    res["total_loss"] = check(lambda zz: total_loss(img, zz, weights).total, [z])
    return res


def rng_fixed(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(seed + 1).normal(size=shape)


def unet_check(seed: int = 0, max_entries: int = 40) -> float:
    """Gradient of sum(logits) w.r.t. a sample of weights of a tiny network."""
    from .unet import UNet, UNetConfig

    net = UNet(UNetConfig(2, 3, depth=1, base_channels=2), seed=seed)
    x = np.random.default_rng(seed).normal(size=(2, 8, 8))
    names = list(net.params)
    arrays = [net.params[k].data.copy() for k in names]

    def fn(*ps):
        for k, p in zip(names, ps):
            net.params[k] = p
        return T.sum(T.mul(net(x), Tensor(rng_fixed(seed, (3, 8, 8)))))

    try:
        return check(fn, arrays, max_entries=max_entries, joint=True)
    finally:
        for k, a in zip(names, arrays):
            net.params[k] = T.parameter(a, k)

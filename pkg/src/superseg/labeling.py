"""Connected components, dominant-component masks and small-region merging.

Everything here works on integer grids and is not differentiable.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


@dataclass
class LabelMap:
    labels: np.ndarray  # H x W, int64
    num_labels: int

    @classmethod
    def from_array(cls, labels) -> "LabelMap":
        """Relabel an arbitrary integer grid to contiguous ids in first-encounter order."""
        return cls(*relabel_first_encounter(np.asarray(labels)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_labels)


@dataclass
class ComponentMasks:
    attract: np.ndarray  # N x H x W in {0, 1}; dominant component of a split class
    repel: np.ndarray  # N x H x W in {0, 1}; every other pixel of that class


def relabel_first_encounter(labels: np.ndarray) -> tuple[np.ndarray, int]:
    flat = labels.ravel()
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(labels.shape), len(uniq)


def _edges(shape: tuple[int, int], connectivity: int) -> list[tuple[np.ndarray, np.ndarray]]:
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),
        (idx[:-1, :], idx[1:, :]),
    ]
    if connectivity == 8:
        pairs += [
            (idx[:-1, :-1], idx[1:, 1:]),
            (idx[:-1, 1:], idx[1:, :-1]),
        ]
    elif connectivity != 4:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    return [(a.ravel(), b.ravel()) for a, b in pairs]


def _union_find(classes: np.ndarray, connectivity: int) -> np.ndarray:
    """Root index of every pixel; each root is its component's first pixel."""
    flat = classes.ravel()
    parent = np.arange(flat.size)
    us, vs = [], []
    for a, b in _edges(classes.shape, connectivity):
        same = flat[a] == flat[b]
        us.append(a[same])
        vs.append(b[same])
    u = np.concatenate(us) if us else np.empty(0, dtype=np.int64)
    v = np.concatenate(vs) if vs else np.empty(0, dtype=np.int64)
    while True:
        ru, rv = parent[u], parent[v]
        live = ru != rv
        if not live.any():
            break
        u, v, ru, rv = u[live], v[live], ru[live], rv[live]
        hi = np.maximum(ru, rv)
        lo = np.minimum(ru, rv)
        # hook the larger root under the smaller one
        np.minimum.at(parent, hi, lo)
        # full path compression by pointer jumping
        while True:
            nxt = parent[parent]
            if np.array_equal(nxt, parent):
                break
            parent = nxt
    return parent


def label_components(class_map, connectivity: int = 4) -> LabelMap:
    """Split every class region into connected components.

    Two pixels share a label iff they hold the same class and are joined by a
    path of same-class neighbours. Labels follow first row-major encounter.
    """
    class_map = np.asarray(class_map)
    if class_map.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {class_map.shape}")
    if class_map.size == 0:
        return LabelMap(np.zeros(class_map.shape, dtype=np.int64), 0)
    roots = _union_find(class_map, connectivity)
    # roots are minimal flat indices, so sorting them is first-encounter order
    uniq, inverse = np.unique(roots, return_inverse=True)
    return LabelMap(inverse.reshape(class_map.shape).astype(np.int64), len(uniq))


def dominant_component_masks(
    segmentation, num_classes: int, connectivity: int = 4, components: LabelMap | None = None
) -> ComponentMasks:
    """Attract/repel masks for classes whose region falls apart into several pieces.

    For a split class the largest component (ties: smallest label id) goes to
    the attract mask and the rest of the class to the repel mask. Classes
    forming a single component, or absent, leave both masks zero.
    """
    seg = np.asarray(segmentation)
    if seg.size and seg.max() >= num_classes:
        raise ValueError(f"segmentation holds class {seg.max()} >= {num_classes}")
    h, w = seg.shape
    attract = np.zeros((num_classes, h, w), dtype=np.float64)
    repel = np.zeros_like(attract)
    if seg.size == 0:
        return ComponentMasks(attract, repel)
    cc = components if components is not None else label_components(seg, connectivity)
    comp = cc.labels.ravel()
    sizes = np.bincount(comp, minlength=cc.num_labels)
    comp_class = np.empty(cc.num_labels, dtype=np.int64)
    comp_class[comp] = seg.ravel()
    pieces = np.bincount(comp_class, minlength=num_classes)
    for n in np.flatnonzero(pieces > 1):
        ids = np.flatnonzero(comp_class == n)
        # argmax returns the first maximum, i.e. the smallest label id on ties
        best = ids[np.argmax(sizes[ids])]
        in_class = (seg == n)
        dom = cc.labels == best
        attract[n] = dom
        repel[n] = in_class & ~dom
    return ComponentMasks(attract, repel)


def _boundary_counts(labels: np.ndarray) -> dict[int, dict[int, int]]:
    adj: dict[int, dict[int, int]] = {}
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pa, pb = a[diff], b[diff]
        if pa.size == 0:
            continue
        lo, hi = np.minimum(pa, pb), np.maximum(pa, pb)
        keys, counts = np.unique(np.stack([lo, hi], axis=1), axis=0, return_counts=True)
        for (x, y), c in zip(keys.tolist(), counts.tolist()):
            adj.setdefault(x, {})
            adj.setdefault(y, {})
            adj[x][y] = adj[x].get(y, 0) + c
            adj[y][x] = adj[y].get(x, 0) + c
    return adj


def enforce_min_size_merge(segments: LabelMap, min_size: int) -> LabelMap:
    """Absorb every region smaller than ``min_size`` into a 4-adjacent neighbour.

    Regions are visited smallest first (ties: smaller label). Each is merged
    into the neighbour sharing the longest boundary, preferring the larger
    neighbour and then the smaller label on ties. The result is relabelled to
    contiguous ids in first-encounter order.
    """
    labels = np.asarray(segments.labels)
    if labels.size <= min_size:
        return LabelMap(np.zeros_like(labels, dtype=np.int64), 1 if labels.size else 0)
    sizes = dict(enumerate(np.bincount(labels.ravel(), minlength=segments.num_labels).tolist()))
    adj = _boundary_counts(labels)
    owner = np.arange(segments.num_labels)

    heap = [(s, lab) for lab, s in sizes.items() if s < min_size]
    heapq.heapify(heap)
    while heap and len(sizes) > 1:
        s, lab = heapq.heappop(heap)
        if lab not in sizes or sizes[lab] != s or s >= min_size:
            continue
        nbrs = adj.get(lab, {})
        if not nbrs:
            continue
        target = min(nbrs, key=lambda t: (-nbrs[t], -sizes[t], t))
        # fold lab into target
        for other, count in nbrs.items():
            adj[other].pop(lab, None)
            if other == target:
                continue
            adj[target][other] = adj[target].get(other, 0) + count
            adj[other][target] = adj[other].get(target, 0) + count
        adj.pop(lab, None)
        sizes[target] += sizes.pop(lab)
        owner[owner == lab] = target
        if sizes[target] < min_size:
            heapq.heappush(heap, (sizes[target], target))
    merged = owner[labels]
    return LabelMap(*relabel_first_encounter(merged))


def split_max_size(segments: LabelMap, max_size: int) -> LabelMap:
    raise NotImplementedError("maximum-size splitting is not implemented")

"""Slow reference implementations used only by the tests."""

import itertools
import sys

import numpy as np


def flood_fill_components(class_map, connectivity=4):
    """Recursive flood fill; labels in first row-major encounter order."""
    grid = np.asarray(class_map)
    h, w = grid.shape
    labels = -np.ones((h, w), dtype=np.int64)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * h * w + 100))

    def fill(y, x, lab, cls):
        labels[y, x] = lab
        for dy, dx in steps:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] < 0 and grid[ny, nx] == cls:
                fill(ny, nx, lab, cls)

    count = 0
    try:
        for y in range(h):
            for x in range(w):
                if labels[y, x] < 0:
                    fill(y, x, count, grid[y, x])
                    count += 1
    finally:
        sys.setrecursionlimit(limit)
    return labels, count


def brute_force_simplex_projection(z):
    """argmin_{p in simplex} |p - z|^2 by trying every support set."""
    z = np.asarray(z, dtype=float)
    n = z.size
    best, best_cost = None, np.inf
    for k in range(1, n + 1):
        for support in itertools.combinations(range(n), k):
            idx = list(support)
            tau = (z[idx].sum() - 1.0) / k
            p = np.zeros(n)
            p[idx] = z[idx] - tau
            if (p[idx] < -1e-15).any():
                continue
            cost = ((p - z) ** 2).sum()
            if cost < best_cost:
                best, best_cost = p, cost
    return best


def is_partition_connected(labels, connectivity=4):
    """Every label forms exactly one connected component."""
    comps, count = flood_fill_components(labels, connectivity)
    return count == len(np.unique(labels))

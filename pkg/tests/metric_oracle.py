"""Naive reference implementations of the mask metrics, used as test oracles.

Everything here is written with explicit loops over voxel coordinates and
shares no code with the package.
"""
import itertools
import math

import numpy as np

NEIGHBOURS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def surface_coords(mask):
    shape = mask.shape
    out = []
    for idx in itertools.product(*[range(n) for n in shape]):
        if not mask[idx]:
            continue
        for d in NEIGHBOURS:
            nb = tuple(i + o for i, o in zip(idx, d))
            if any(c < 0 or c >= n for c, n in zip(nb, shape)) or not mask[nb]:
                out.append(idx)
                break
    return out


def directed(src, dst, spacing):
    return [min(math.sqrt(sum(((a - b) * s) ** 2 for a, b, s in zip(u, v, spacing))) for v in dst) for u in src]


def percentile_linear(values, q):
    v = sorted(values)
    pos = q / 100 * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def oracle(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """(dice, jaccard, hd95, asd); surface metrics are None for an empty mask."""
    inter = int(np.logical_and(pred, gt).sum())
    a, b = int(pred.sum()), int(gt.sum())
    union = a + b - inter
    d = 1.0 if a + b == 0 else 2 * inter / (a + b)
    j = 1.0 if union == 0 else inter / union
    if a == 0 or b == 0:
        return d, j, None, None
    sp, sg = surface_coords(pred), surface_coords(gt)
    dist = directed(sp, sg, spacing) + directed(sg, sp, spacing)
    return d, j, percentile_linear(dist, 95), sum(dist) / len(dist)


def small_masks(shape=(3, 3, 3), max_fg=4):
    """Every binary mask of ``shape`` with at most ``max_fg`` foreground voxels, as flat index tuples."""
    n = int(np.prod(shape))
    for k in range(max_fg + 1):
        yield from itertools.combinations(range(n), k)


def exhaustive_pairs(shape=(3, 3, 3), max_fg=4):
    """All (pred, gt) index-tuple pairs whose combined foreground count is at most ``max_fg``."""
    n = int(np.prod(shape))
    by_size = [list(itertools.combinations(range(n), k)) for k in range(max_fg + 1)]
    for a in range(max_fg + 1):
        for b in range(max_fg + 1 - a):
            for p in by_size[a]:
                for g in by_size[b]:
                    yield p, g


class FastOracle:
    """The same definitions as ``oracle`` with per-grid lookup tables, for the exhaustive sweep."""

    def __init__(self, shape, spacing):
        self.shape = shape
        self.coords = list(itertools.product(*[range(n) for n in shape]))
        c = np.array(self.coords, dtype=float) * np.array(spacing, dtype=float)
        self.dist = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        self.nbrs = []
        for idx in self.coords:
            row = []
            for d in NEIGHBOURS:
                nb = tuple(i + o for i, o in zip(idx, d))
                row.append(None if any(x < 0 or x >= m for x, m in zip(nb, shape)) else
                           int(np.ravel_multi_index(nb, shape)))
            self.nbrs.append(row)

    def _surface(self, fg):
        fgs = set(fg)
        return [v for v in fg if any(nb is None or nb not in fgs for nb in self.nbrs[v])]

    def __call__(self, p, g):
        inter = len(set(p) & set(g))
        a, b = len(p), len(g)
        union = a + b - inter
        d = 1.0 if a + b == 0 else 2 * inter / (a + b)
        j = 1.0 if union == 0 else inter / union
        if a == 0 or b == 0:
            return d, j, None, None
        sp, sg = self._surface(p), self._surface(g)
        dist = [min(self.dist[u, v] for v in sg) for u in sp] + [min(self.dist[u, v] for v in sp) for u in sg]
        return d, j, percentile_linear(dist, 95), sum(dist) / len(dist)


def to_mask(flat, shape):
    m = np.zeros(int(np.prod(shape)), dtype=bool)
    m[list(flat)] = True
    return m.reshape(shape)

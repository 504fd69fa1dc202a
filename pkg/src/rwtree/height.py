"""Height and Lukasiewicz processes, the type-1 index map, rescaling, and
Gromov-Hausdorff upper bounds between trees."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .reduce import LeafedForest, RangeForest

KINDS = ("plain", "weighted", "type1_restricted")


@dataclass
class HeightSeries:
    values: np.ndarray
    kind: str

    def __len__(self):
        return self.values.shape[0]

    def write_csv(self, path, n: int | None = None, kappa: float | None = None):
        with open(path, "w") as fh:
            if n is not None:
                fh.write(f"# n={n},kappa={_fmt(kappa)},c_n={_fmt(normalization(n, kappa))}\n")
            fh.write("index,value\n")
            for i, v in enumerate(self.values):
                fh.write(f"{i},{_fmt(v)}\n")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return f"{x:.17g}"


@njit(cache=True)
def _accumulate(parent, ell):
    h = np.zeros(parent.shape[0], dtype=np.int64)
    for i in range(parent.shape[0]):
        p = parent[i]
        if p >= 0:
            h[i] = h[p] + ell[i]
    return h


def height_process(forest, restriction: str = "all") -> HeightSeries:
    """Heights of the vertices in lexicographic order.

    For a LeafedForest, ``all`` gives the weighted heights (sums of edge
    lengths along the ancestry) and ``type1`` the plain heights of the
    type-1 skeleton.  A RangeForest gives its plain heights.
    """
    if isinstance(forest, RangeForest):
        return HeightSeries(forest.depth.copy(), "plain")
    if restriction == "all":
        return HeightSeries(_accumulate(forest.parent, forest.ell), "weighted")
    if restriction == "type1":
        sk = forest.type1_restriction()
        return HeightSeries(_accumulate(sk.parent, np.ones_like(sk.ell)), "type1_restricted")
    if restriction == "plain":
        return HeightSeries(_accumulate(forest.parent, np.ones_like(forest.ell)), "plain")
    raise ValueError("restriction must be 'all', 'type1' or 'plain'")


@dataclass
class LukasiewiczPath:
    values: np.ndarray
    record_times: np.ndarray


def lukasiewicz(skeleton: LeafedForest) -> LukasiewiczPath:
    """S_0 = 0, S_{k+1} = S_k + (number of children of the k-th vertex) - 1."""
    nu = skeleton.n_children()
    S = np.zeros(nu.shape[0] + 1, dtype=np.int64)
    S[1:] = np.cumsum(nu - 1)
    prev_max = np.maximum.accumulate(S)[:-1]
    records = np.nonzero(S[1:] > prev_max)[0] + 1
    return LukasiewiczPath(S, records)


def phi_index_map(forest: LeafedForest) -> np.ndarray:
    """Type-1 index of each vertex if it has type 1, else of its parent."""
    t1 = forest.ty == 1
    rank = np.cumsum(t1) - 1
    own = rank
    par = rank[np.maximum(forest.parent, 0)]
    phi = np.where(t1, own, par)
    if np.any(~t1 & (forest.parent < 0)):
        raise ValueError("a type-0 root has no type-1 index")
    return phi


def normalization(n: float, kappa: float) -> float:
    if not (1.0 < kappa <= 2.0):
        raise ValueError("kappa must lie in (1, 2]")
    if kappa < 2.0:
        return float(n) ** (1.0 - 1.0 / kappa)
    if n < 2:
        raise ValueError("the kappa = 2 normalization needs n >= 2")
    return math.sqrt(n / math.log(n))


def rescale(series, n: float, kappa: float) -> np.ndarray:
    values = series.values if isinstance(series, HeightSeries) else np.asarray(series)
    return np.asarray(values, dtype=float) / normalization(n, kappa)


# Range-minimum queries and tree metrics.

class SparseTable:
    """Static range-minimum structure with O(1) queries on closed intervals."""

    def __init__(self, values):
        v = np.asarray(values)
        self.values = v
        n = v.shape[0]
        levels = [np.arange(n, dtype=np.int64)]
        k = 1
        while (1 << k) <= n:
            prev = levels[-1]
            half = 1 << (k - 1)
            a = prev[: n - (1 << k) + 1]
            b = prev[half: half + a.shape[0]]
            levels.append(np.where(v[b] < v[a], b, a))
            k += 1
        self._levels = levels

    def argmin(self, lo, hi):
        """Leftmost position of the minimum over [lo, hi] (arrays allowed)."""
        scalar = np.ndim(lo) == 0 and np.ndim(hi) == 0
        lo, hi = np.broadcast_arrays(np.atleast_1d(np.asarray(lo, dtype=np.int64)),
                                     np.atleast_1d(np.asarray(hi, dtype=np.int64)))
        if np.any(hi < lo):
            raise ValueError("empty interval")
        k = np.floor(np.log2(hi - lo + 1)).astype(np.int64)
        out = np.empty(lo.shape, dtype=np.int64)
        for level in np.unique(k):
            sel = k == level
            t = self._levels[level]
            a = t[lo[sel]]
            b = t[hi[sel] - (1 << level) + 1]
            out[sel] = np.where(self.values[b] < self.values[a], b, a)
        return int(out[0]) if scalar else out

    def min(self, lo, hi):
        return self.values[self.argmin(lo, hi)]


class CodedTree:
    """Pseudometric d(s,t) = g(s) + g(t) - 2 min g over [s, t] on a grid."""

    def __init__(self, driver, resolution: float = 1.0):
        g = np.asarray(driver, dtype=float)
        if np.any(g < 0):
            raise ValueError("driver must be nonnegative")
        self.g = g
        self.resolution = resolution
        self._rmq = SparseTable(g)
        self.size = g.shape[0]
        self.root = int(np.argmin(g))

    def dist(self, s, t):
        s = np.asarray(s, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        lo, hi = np.minimum(s, t), np.maximum(s, t)
        return self.g[s] + self.g[t] - 2 * self._rmq.min(lo, hi)


class ForestMetric:
    """Graph metric of a forest listed in lexicographic order, edges weighted
    by ``lengths``; distinct roots sit at distance 0 from each other."""

    def __init__(self, parent, lengths=None):
        self.parent = np.asarray(parent, dtype=np.int64)
        ones = np.ones_like(self.parent)
        self.depth = _accumulate(self.parent, ones)
        self.h = _accumulate(self.parent, ones if lengths is None else np.asarray(lengths, np.int64))
        self._rmq = SparseTable(self.depth)
        self.size = self.parent.shape[0]
        self.root = 0

    @classmethod
    def of(cls, forest) -> "ForestMetric":
        if isinstance(forest, RangeForest):
            return cls(forest.parent)
        return cls(forest.parent, forest.ell)

    def lca(self, i, j):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        same = lo == hi
        k = self._rmq.argmin(np.where(same, lo, lo + 1), hi)
        return np.where(same, lo, self.parent[k])

    def dist(self, i, j):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        z = self.lca(i, j)
        hz = np.where(z >= 0, self.h[np.maximum(z, 0)], 0)
        return self.h[i] + self.h[j] - 2 * hz


def gh_upper_bound(tree_a, tree_b, correspondence, n_pairs: int = 200_000, seed=0,
                   exhaustive_below: int = 1500) -> float:
    """Half the distortion of a surjective root-preserving map from A onto B.

    All pairs are used when A is small, otherwise ``n_pairs`` uniformly
    sampled pairs together with every pair (root, x).
    """
    phi = np.asarray(correspondence, dtype=np.int64)
    if phi.shape[0] != tree_a.size:
        raise ValueError("the map must be defined on every point of A")
    if np.unique(phi).shape[0] != tree_b.size or phi.min() < 0 or phi.max() >= tree_b.size:
        raise ValueError("the map must be onto B")
    if phi[tree_a.root] != tree_b.root:
        raise ValueError("the map must send root to root")
    n = tree_a.size
    if n <= exhaustive_below:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, n_pairs)
        j = rng.integers(0, n, n_pairs)
        i = np.concatenate([i, np.full(n, tree_a.root)])
        j = np.concatenate([j, np.arange(n)])
    if i.size == 0:
        return 0.0
    da = tree_a.dist(i, j)
    db = tree_b.dist(phi[i], phi[j])
    return 0.5 * float(np.max(np.abs(da - db)))

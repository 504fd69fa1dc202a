"""Optional lines and the two leafed-forest reductions of a walk's range.

The range of a walk is handled as a ``RangeForest``: its vertices listed in
lexicographic (depth-first, birth order) order together with their edge
local times.  Two typed forests with edge lengths are built from it:

* ``build_FR``: every type-1 vertex (a root or a vertex crossed exactly
  once) receives as children its optional line B1, i.e. the descendants
  reached before meeting another type-1 vertex; the edge length is the
  generation gap.
* ``build_FX``: the type-1 skeleton is attached in first-visit order and
  every step of the walk that does not discover a type-1 vertex adds a
  sterile type-0 vertex, so the lexicographic order is chronological.

The module also samples optional lines directly from the multitype
branching structure of the local times: given beta(u) = i and the
displacements of the children of u, the children's local times are
negative multinomial, realized here as Poisson counts with a common
Gamma(i) intensity.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .env import EnvironmentModel
from .rng import job_seeds, mt_seed
from .walk import TreeArena, WalkTrace


class StructureError(ValueError):
    """Local times inconsistent with the range, or an unfinished tree."""


@njit(cache=True)
def _preorder_from_children(roots, child_ptr, child_idx, n):
    order = np.empty(n, dtype=np.int64)
    stack = np.empty(n + 1, dtype=np.int64)
    k = 0
    for r in roots:
        top = 0
        stack[0] = r
        top = 1
        while top > 0:
            top -= 1
            u = stack[top]
            order[k] = u
            k += 1
            for j in range(child_ptr[u + 1] - 1, child_ptr[u] - 1, -1):
                stack[top] = child_idx[j]
                top += 1
    return order[:k]


def _csr(parent: np.ndarray, order_key: np.ndarray | None = None):
    """Children lists as CSR, siblings sorted by order_key (default: index)."""
    n = parent.shape[0]
    kids = np.nonzero(parent >= 0)[0]
    if order_key is None:
        sort = np.lexsort((kids, parent[kids]))
    else:
        sort = np.lexsort((kids, order_key[kids], parent[kids]))
    kids = kids[sort]
    counts = np.bincount(parent[kids], minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(counts)
    return ptr, kids.astype(np.int64)


def _relabel(parent: np.ndarray, order: np.ndarray) -> np.ndarray:
    pos = np.empty(order.shape[0], dtype=np.int64)
    pos[order] = np.arange(order.shape[0])
    p = parent[order]
    return np.where(p >= 0, pos[np.maximum(p, 0)], -1)


@njit(cache=True)
def _anchor(parent, beta):
    n = parent.shape[0]
    anchor = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        p = parent[i]
        if p >= 0:
            if beta[p] == 1 or parent[p] < 0:
                anchor[i] = p
            else:
                anchor[i] = anchor[p]
    return anchor


@njit(cache=True)
def _depths(parent):
    depth = np.zeros(parent.shape[0], dtype=np.int64)
    for i in range(parent.shape[0]):
        if parent[i] >= 0:
            depth[i] = depth[parent[i]] + 1
    return depth


@dataclass
class RangeForest:
    """Visited vertices in lexicographic order.

    ``parent`` holds positions in this listing (-1 for roots); ``label`` is
    the arena id (or the caller's label) of each position.
    """

    parent: np.ndarray
    depth: np.ndarray
    beta: np.ndarray
    label: np.ndarray
    first_visit: np.ndarray | None = None
    complete: bool = True
    _csr: tuple | None = field(default=None, repr=False)

    def __len__(self):
        return self.parent.shape[0]

    @property
    def children_csr(self):
        if self._csr is None:
            self._csr = _csr(self.parent)
        return self._csr

    def children(self, i: int) -> np.ndarray:
        ptr, idx = self.children_csr
        return idx[ptr[i]: ptr[i + 1]]

    @property
    def roots(self) -> np.ndarray:
        return np.nonzero(self.parent < 0)[0]

    def type1_anchor(self) -> np.ndarray:
        """Nearest strict ancestor with beta = 1 (roots count as type 1)."""
        return _anchor(self.parent, self.beta)

    @classmethod
    def from_parents(cls, parents, beta, labels=None, first_visit=None) -> "RangeForest":
        """Build from a parent list in any order; children keep input order."""
        parents = np.asarray(parents, dtype=np.int64)
        beta = np.asarray(beta, dtype=np.int64)
        n = parents.shape[0]
        ptr, idx = _csr(parents)
        roots = np.nonzero(parents < 0)[0]
        order = _preorder_from_children(roots, ptr, idx, n)
        if order.shape[0] != n:
            raise StructureError("parent list does not describe a forest")
        parent = _relabel(parents, order)
        depth = _depths(parent)
        lab = order if labels is None else np.asarray(labels)[order]
        fv = None if first_visit is None else np.asarray(first_visit)[order]
        return cls(parent, depth, beta[order], lab, fv)


def visited_forest(trace: WalkTrace, arena: TreeArena, complete: bool = False) -> RangeForest:
    """Range of a walk as a RangeForest carrying the walk's local times.

    Pass ``complete=True`` only for traces that have left every tree they
    entered (see ``walk.complete_prefix``); the reductions refuse the rest.
    """
    from .walk import edge_local_times

    steps = trace.steps
    if np.any(steps < 0):
        raise StructureError("reductions apply to walks that stay inside the forest")
    beta_all = edge_local_times(trace, arena).beta
    first = np.full(arena.n_vertices, -1, dtype=np.int64)
    uniq, idx = np.unique(steps, return_index=True)
    first[uniq] = idx
    ids = uniq
    par = arena.parent[ids]
    local = np.full(arena.n_vertices, -1, dtype=np.int64)
    local[ids] = np.arange(ids.shape[0])
    lpar = np.where(par >= 0, local[np.maximum(par, 0)], -1)
    rf = RangeForest.from_parents(lpar, beta_all[ids], labels=ids, first_visit=first[ids])
    rf.complete = complete
    return rf


@dataclass
class OptionalLine:
    anchor: int
    B1: list
    L1: list

    @property
    def n_B1(self) -> int:
        return len(self.B1)

    @property
    def n_L1(self) -> int:
        return len(self.L1)


def optional_line(forest: RangeForest, u: int) -> OptionalLine:
    """Descendants of u reached before (and including) the first vertices
    with beta = 1, in lexicographic order."""
    B1, L1 = [], []
    stack = list(forest.children(u)[::-1])
    while stack:
        v = int(stack.pop())
        b = forest.beta[v]
        if b == 0:
            raise StructureError(f"vertex {v} in the range has beta = 0")
        B1.append(v)
        if b == 1:
            L1.append(v)
        else:
            stack.extend(forest.children(v)[::-1].tolist())
    return OptionalLine(int(u), B1, L1)


@dataclass
class LeafedForest:
    """Typed forest with integer edge lengths, vertices in lexicographic order."""

    parent: np.ndarray
    ty: np.ndarray
    ell: np.ndarray
    origin: np.ndarray

    def __len__(self):
        return self.parent.shape[0]

    @classmethod
    def from_nodes(cls, parent, ty, ell, origin, sibling_key=None) -> "LeafedForest":
        """Put nodes (listed in any order, parents and siblings identified by
        position and sibling_key) into lexicographic order."""
        parent = np.asarray(parent, dtype=np.int64)
        n = parent.shape[0]
        key = None if sibling_key is None else np.asarray(sibling_key)
        ptr, idx = _csr(parent, key)
        roots = np.nonzero(parent < 0)[0]
        if key is not None:
            roots = roots[np.argsort(key[roots], kind="stable")]
        order = _preorder_from_children(roots, ptr, idx, n)
        return cls(_relabel(parent, order), np.asarray(ty, np.int8)[order],
                   np.asarray(ell, np.int64)[order], np.asarray(origin, np.int64)[order])

    def type1_restriction(self) -> "LeafedForest":
        keep = np.nonzero(self.ty == 1)[0]
        pos = np.full(len(self), -1, dtype=np.int64)
        pos[keep] = np.arange(keep.shape[0])
        p = self.parent[keep]
        return LeafedForest(np.where(p >= 0, pos[np.maximum(p, 0)], -1), self.ty[keep],
                            self.ell[keep], self.origin[keep])

    def reorder_siblings(self, key) -> "LeafedForest":
        key = np.asarray(key)
        return LeafedForest.from_nodes(self.parent, self.ty, self.ell, self.origin, key)

    def n_children(self) -> np.ndarray:
        return np.bincount(self.parent[self.parent >= 0], minlength=len(self))

    def canonical(self) -> tuple:
        return (self.parent.tolist(), self.ty.tolist(), self.ell.tolist())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["id", "parent", "type", "ell"])
            for i in range(len(self)):
                out.writerow([i, int(self.parent[i]), int(self.ty[i]), int(self.ell[i])])


def _check_range(forest: RangeForest):
    if not forest.complete:
        raise StructureError("reductions need fully explored trees; use complete_prefix")
    nonroot = forest.parent >= 0
    if np.any(forest.beta[nonroot] < 1):
        raise StructureError("a non-root vertex of the range has beta = 0")


def build_FR(forest: RangeForest) -> LeafedForest:
    """Each type-1 vertex adopts its optional line; edge length = generation gap."""
    _check_range(forest)
    parent, ty, ell, origin = [], [], [], []
    queue = []
    for r in forest.roots:
        parent.append(-1)
        ty.append(1)
        ell.append(0)
        origin.append(int(r))
        queue.append(len(origin) - 1)
    head = 0
    while head < len(queue):
        node = queue[head]
        head += 1
        u = origin[node]
        line = optional_line(forest, u)
        for v in line.B1:
            t = 1 if forest.beta[v] == 1 else 0
            parent.append(node)
            ty.append(t)
            ell.append(int(forest.depth[v] - forest.depth[u]))
            origin.append(v)
            if t == 1:
                queue.append(len(origin) - 1)
    # siblings keep the lexicographic order of their origins
    return LeafedForest.from_nodes(parent, ty, ell, origin, sibling_key=origin)


def build_FX(forest: RangeForest, positions: np.ndarray) -> LeafedForest:
    """Chronological leafed forest of a walk.

    ``positions[n]`` is the RangeForest position of X_n.  Vertex creation
    follows the walk: the first visit of a type-1 vertex attaches it below
    its nearest type-1 ancestor; every other step attaches a type-0 vertex,
    below the current vertex when it is of type 1 (length 0), else below its
    nearest type-1 ancestor (length = generation gap).  Origins record the
    step index.
    """
    _check_range(forest)
    positions = np.asarray(positions, dtype=np.int64)
    anchor = forest.type1_anchor()
    is_t1 = (forest.beta == 1) | (forest.parent < 0)
    node_of = np.full(len(forest), -1, dtype=np.int64)
    N = positions.shape[0]
    parent = np.empty(N, dtype=np.int64)
    ty = np.empty(N, dtype=np.int8)
    ell = np.empty(N, dtype=np.int64)
    for n in range(N):
        x = positions[n]
        if is_t1[x]:
            if node_of[x] < 0:
                node_of[x] = n
                a = anchor[x]
                parent[n] = -1 if a < 0 else node_of[a]
                if a >= 0 and node_of[a] < 0:
                    raise StructureError("type-1 vertex visited before its anchor")
                ty[n] = 1
                ell[n] = 0 if a < 0 else forest.depth[x] - forest.depth[a]
            else:
                parent[n] = node_of[x]
                ty[n] = 0
                ell[n] = 0
        else:
            a = anchor[x]
            parent[n] = node_of[a]
            ty[n] = 0
            ell[n] = forest.depth[x] - forest.depth[a]
    return LeafedForest.from_nodes(parent, ty, ell, np.arange(N), sibling_key=np.arange(N))


def trace_positions(trace: WalkTrace, forest: RangeForest) -> np.ndarray:
    lookup = {int(v): i for i, v in enumerate(forest.label)}
    return np.array([lookup[int(v)] for v in trace.steps], dtype=np.int64)


# Sampling optional lines from the branching structure of local times.

@njit(cache=True)
def _children_counts(b, cum, offsets, marks, out_marks, out_counts):
    """Negative multinomial local times of the children of a vertex with
    local time b; returns the number of children written."""
    a = np.searchsorted(cum, np.random.random(), side="right")
    if a >= cum.shape[0]:
        a = cum.shape[0] - 1
    lo = offsets[a]
    c = offsets[a + 1] - lo
    g = np.random.gamma(b, 1.0)
    for i in range(c):
        d = marks[lo + i]
        out_marks[i] = d
        out_counts[i] = np.random.poisson(g * np.exp(-d))
    return c


@njit(cache=True, nogil=True)
def _line_batch(n_samples, i0, cum, offsets, marks, r, seed, out):
    """Columns of out: |L1|, |B1|, sum beta over B1, sum |u| over L1,
    sum beta r^|u| over B1, max depth reached."""
    np.random.seed(seed)
    maxc = 1
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    cm = np.empty(maxc)
    cc = np.empty(maxc, dtype=np.int64)
    cap = 1024
    sb = np.empty(cap, dtype=np.int64)
    sd = np.empty(cap, dtype=np.int64)
    for s in range(n_samples):
        L1 = 0
        B1 = 0
        sbeta = 0
        sdep = 0
        wsum = 0.0
        mdep = 0
        top = 1
        sb[0] = i0
        sd[0] = 0
        while top > 0:
            top -= 1
            b = sb[top]
            d = sd[top]
            c = _children_counts(b, cum, offsets, marks, cm, cc)
            for i in range(c):
                k = cc[i]
                if k == 0:
                    continue
                B1 += 1
                sbeta += k
                wsum += k * r ** (d + 1)
                if d + 1 > mdep:
                    mdep = d + 1
                if k == 1:
                    L1 += 1
                    sdep += d + 1
                else:
                    if top == cap:
                        cap *= 2
                        nb = np.empty(cap, dtype=np.int64)
                        nd = np.empty(cap, dtype=np.int64)
                        nb[:top] = sb[:top]
                        nd[:top] = sd[:top]
                        sb = nb
                        sd = nd
                    sb[top] = k
                    sd[top] = d + 1
                    top += 1
        out[s, 0] = L1
        out[s, 1] = B1
        out[s, 2] = sbeta
        out[s, 3] = sdep
        out[s, 4] = wsum
        out[s, 5] = mdep


LINE_COLUMNS = ("L1", "B1", "sum_beta", "sum_depth_L1", "sum_beta_r", "max_depth")


def sample_line_counts(model: EnvironmentModel, n_samples: int, seed, start_type: int = 1,
                       r: float = 0.0, jobs: int = 64, workers: int = 1) -> dict[str, np.ndarray]:
    """Optional-line statistics of n_samples independent trees under P_i."""
    from .parallel import map_jobs

    cum, offsets, marks = model.tables()
    sizes = _split(n_samples, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        out = np.zeros((sizes[j], len(LINE_COLUMNS)))
        _line_batch(sizes[j], start_type, cum, offsets, marks, r, mt_seed(seeds[j]), out)
        return out

    res = np.concatenate(map_jobs(one, range(len(sizes)), workers), axis=0)
    return {name: res[:, k] for k, name in enumerate(LINE_COLUMNS)}


def _split(n: int, jobs: int) -> list[int]:
    jobs = max(1, min(jobs, n)) if n > 0 else 1
    base, extra = divmod(n, jobs)
    return [base + (1 if j < extra else 0) for j in range(jobs)]


@dataclass
class LineSummary:
    n: int
    mean_L1: float
    se_L1: float
    mean_B1: float
    se_B1: float
    mean_sum_beta: float
    se_sum_beta: float
    L1_samples: np.ndarray

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("L1_samples")
        return d


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if x.size == 0:
        return 0.0, 0.0
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def line_statistics(lines) -> LineSummary:
    """Summary of optional lines, given as OptionalLine objects (with the
    RangeForest they live in) or as the dict from ``sample_line_counts``."""
    if isinstance(lines, dict):
        L1 = np.asarray(lines["L1"], float)
        B1 = np.asarray(lines["B1"], float)
        sb = np.asarray(lines["sum_beta"], float)
    else:
        lines = list(lines)
        L1 = np.array([ln.n_L1 for ln, _ in lines], float)
        B1 = np.array([ln.n_B1 for ln, _ in lines], float)
        sb = np.array([float(np.sum(f.beta[ln.B1])) if ln.B1 else 0.0 for ln, f in lines])
    mL, sL = _mean_se(L1)
    mB, sB = _mean_se(B1)
    mS, sS = _mean_se(sb)
    return LineSummary(int(L1.size), mL, sL, mB, sB, mS, sS, L1)


# Range forests drawn directly from the branching structure.

@njit(cache=True, nogil=True)
def _grow_forest(n, cum, offsets, marks, seed, parent, depth, beta):
    """Lexicographic prefix of n vertices of a forest of independent trees
    under P_1; returns the number of complete trees."""
    np.random.seed(seed)
    maxc = 1
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    cm = np.empty(maxc)
    cc = np.empty(maxc, dtype=np.int64)
    cap = 1024
    sb = np.empty(cap, dtype=np.int64)
    sd = np.empty(cap, dtype=np.int64)
    sp = np.empty(cap, dtype=np.int64)
    top = 0
    k = 0
    trees = 0
    while k < n:
        if top == 0:
            if k > 0:
                trees += 1
            sb[0] = 1
            sd[0] = 0
            sp[0] = -1
            top = 1
        top -= 1
        b = sb[top]
        d = sd[top]
        parent[k] = sp[top]
        depth[k] = d
        beta[k] = b
        me = k
        k += 1
        c = _children_counts(b, cum, offsets, marks, cm, cc)
        if top + c > cap:
            cap = 2 * (top + c)
            nb = np.empty(cap, dtype=np.int64)
            nd = np.empty(cap, dtype=np.int64)
            npp = np.empty(cap, dtype=np.int64)
            nb[:top] = sb[:top]
            nd[:top] = sd[:top]
            npp[:top] = sp[:top]
            sb = nb
            sd = nd
            sp = npp
        for i in range(c - 1, -1, -1):
            if cc[i] > 0:
                sb[top] = cc[i]
                sd[top] = d + 1
                sp[top] = me
                top += 1
    return trees


def sample_range_forest(model: EnvironmentModel, n: int, seed) -> RangeForest:
    """First n lexicographic vertices of a forest of independent P_1 trees,
    with their local times.  The last tree is usually cut."""
    cum, offsets, marks = model.tables()
    parent = np.empty(n, dtype=np.int64)
    depth = np.empty(n, dtype=np.int64)
    beta = np.empty(n, dtype=np.int64)
    _grow_forest(n, cum, offsets, marks, mt_seed(seed), parent, depth, beta)
    return RangeForest(parent, depth, beta, np.arange(n), complete=False)


def fast_FR(forest: RangeForest) -> LeafedForest:
    """F^R of a range forest in the forest's own lexicographic order.

    Relies on the reduction preserving lexicographic order, which the tests
    check against ``build_FR``; usable on prefixes of forests.
    """
    anchor = forest.type1_anchor()
    ty = ((forest.beta == 1) | (forest.parent < 0)).astype(np.int8)
    ell = np.where(anchor >= 0, forest.depth - forest.depth[np.maximum(anchor, 0)], 0)
    return LeafedForest(anchor, ty, ell, np.arange(len(forest)))

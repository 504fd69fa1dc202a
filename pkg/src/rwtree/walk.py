"""Nearest-neighbour walk on a lazily generated marked tree or forest.

From a vertex u the walk moves to its parent with weight exp(-V(u)) and to
its i-th child with weight exp(-V(ui)).  Weights are stored relative to the
parent, i.e. 1 for the parent move and exp(-(V(ui) - V(u))) for child i, so
deep vertices never overflow.

In ``tree_reflected`` mode the root has an artificial parent, encoded as
vertex id ``-1`` in traces, from which the walk returns to the root.  In
``forest`` mode the parent move of root j leads to root j + 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numba import njit

from .env import EnvironmentModel
from .rng import child_key, key64, root_key, uniform_at

ARTIFICIAL_PARENT = -1
MODES = ("tree_reflected", "forest")
DEFAULT_VERTEX_BUDGET = 50_000_000

_DONE, _NEED_SPACE, _BUDGET, _CLOSED = 0, 1, 2, 3


class VertexBudgetExceeded(RuntimeError):
    """The arena would grow past its vertex budget."""


@njit(cache=True)
def _expand(u, parent, V, w, wsum, first_child, n_children, gen, key, tree,
            nv, cum, offsets, marks):
    """Sample the children of u; returns the new vertex count."""
    a = np.searchsorted(cum, uniform_at(key[u], 0), side="right")
    if a >= cum.shape[0]:
        a = cum.shape[0] - 1
    lo = offsets[a]
    c = offsets[a + 1] - lo
    s = 1.0
    for i in range(c):
        v = nv + i
        d = marks[lo + i]
        parent[v] = u
        V[v] = V[u] + d
        w[v] = np.exp(-d)
        s += w[v]
        first_child[v] = -1
        n_children[v] = 0
        gen[v] = gen[u] + 1
        key[v] = child_key(key[u], i)
        tree[v] = tree[u]
    first_child[u] = nv
    n_children[u] = c
    wsum[u] = s
    return nv + c


@njit(cache=True)
def _new_root(j, parent, V, w, wsum, first_child, n_children, gen, key, tree,
              nv, roots, env_key):
    parent[nv] = -1
    V[nv] = 0.0
    w[nv] = 1.0
    wsum[nv] = 1.0
    first_child[nv] = -1
    n_children[nv] = 0
    gen[nv] = 0
    key[nv] = root_key(env_key, j)
    tree[nv] = j
    roots[j] = nv
    return nv + 1


@njit(cache=True, nogil=True)
def _walk_kernel(parent, V, w, wsum, first_child, n_children, gen, key, tree,
                 roots, counts, env_key, cum, offsets, marks, closed,
                 trace, s0, n_steps, forest, walk_key, budget):
    """Advance the walk from trace[s0] until trace[n_steps] is filled.

    counts = [n_vertices, n_roots]; returns (last filled index, status).
    """
    cap = parent.shape[0]
    maxc = 0
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    nv = counts[0]
    nr = counts[1]
    cur = trace[s0]
    s = s0
    while s < n_steps:
        if cur == -1:
            nxt = roots[0]
        else:
            if first_child[cur] < 0:
                if closed:
                    counts[0] = nv
                    counts[1] = nr
                    return s, _CLOSED
                if nv + maxc + 1 > cap:
                    counts[0] = nv
                    counts[1] = nr
                    return s, _NEED_SPACE
                if nv + maxc > budget:
                    counts[0] = nv
                    counts[1] = nr
                    return s, _BUDGET
                nv = _expand(cur, parent, V, w, wsum, first_child, n_children, gen,
                             key, tree, nv, cum, offsets, marks)
            u = uniform_at(walk_key, s) * wsum[cur]
            if u < 1.0:
                p = parent[cur]
                if p >= 0:
                    nxt = p
                elif not forest:
                    nxt = -1
                else:
                    j = tree[cur] + 1
                    if j >= nr:
                        if closed or j >= roots.shape[0]:
                            counts[0] = nv
                            counts[1] = nr
                            return s, _CLOSED if closed else _NEED_SPACE
                        if nv + 1 > cap:
                            counts[0] = nv
                            counts[1] = nr
                            return s, _NEED_SPACE
                        nv = _new_root(j, parent, V, w, wsum, first_child, n_children,
                                       gen, key, tree, nv, roots, env_key)
                        nr = j + 1
                    nxt = roots[j]
            else:
                fc = first_child[cur]
                nc = n_children[cur]
                nxt = fc + nc - 1
                acc = 1.0
                for i in range(nc - 1):
                    acc += w[fc + i]
                    if u < acc:
                        nxt = fc + i
                        break
        s += 1
        trace[s] = nxt
        cur = nxt
    counts[0] = nv
    counts[1] = nr
    return s, _DONE


_FIELDS = (("parent", np.int64), ("V", np.float64), ("w", np.float64),
           ("wsum", np.float64), ("first_child", np.int64), ("n_children", np.int64),
           ("gen", np.int64), ("key", np.uint64), ("tree", np.int64))


class TreeArena:
    """Append-only table of the vertices of a marked forest.

    Children of a vertex occupy consecutive ids in birth order, which is the
    lexicographic order.  Vertex ``roots[j]`` is the root of tree j.
    """

    def __init__(self, model: EnvironmentModel | None, seed=0, capacity: int = 1 << 12,
                 vertex_budget: int = DEFAULT_VERTEX_BUDGET):
        self.model = model
        self.closed = model is None
        self.vertex_budget = int(vertex_budget)
        self.env_key = key64(seed) if model is not None else np.uint64(0)
        if model is not None:
            self._cum, self._offsets, self._marks = model.tables()
        else:
            self._cum = np.ones(1)
            self._offsets = np.zeros(2, dtype=np.int64)
            self._marks = np.zeros(0)
        cap = max(int(capacity), 16)
        for name, dt in _FIELDS:
            setattr(self, name, np.zeros(cap, dtype=dt))
        self.roots = np.full(16, -1, dtype=np.int64)
        self.counts = np.zeros(2, dtype=np.int64)
        if model is not None:
            self._add_root()

    def _add_root(self) -> int:
        j = int(self.counts[1])
        self._reserve(1)
        if j >= self.roots.shape[0]:
            self.roots = np.concatenate([self.roots, np.full(self.roots.shape[0], -1, np.int64)])
        nv = _new_root(j, self.parent, self.V, self.w, self.wsum, self.first_child,
                       self.n_children, self.gen, self.key, self.tree,
                       int(self.counts[0]), self.roots, self.env_key)
        self.counts[0] = nv
        self.counts[1] = j + 1
        return int(self.roots[j])

    @property
    def n_vertices(self) -> int:
        return int(self.counts[0])

    @property
    def n_roots(self) -> int:
        return int(self.counts[1])

    @property
    def capacity(self) -> int:
        return self.parent.shape[0]

    def _reserve(self, extra: int):
        need = int(self.counts[0]) + extra
        if need <= self.capacity:
            return
        if need > self.vertex_budget:
            raise VertexBudgetExceeded(f"arena would exceed {self.vertex_budget} vertices")
        cap = self.capacity
        while cap < need:
            cap *= 2
        cap = min(cap, max(self.vertex_budget, need))
        for name, _ in _FIELDS:
            old = getattr(self, name)
            new = np.zeros(cap, dtype=old.dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def _grow_roots(self):
        self.roots = np.concatenate([self.roots, np.full(self.roots.shape[0], -1, np.int64)])

    def expand(self, u: int):
        if self.first_child[u] >= 0:
            return
        if self.closed:
            raise ValueError("hand-built arena has no children to sample")
        self._reserve(self.model.max_offspring + 1)
        self.counts[0] = _expand(u, self.parent, self.V, self.w, self.wsum, self.first_child,
                                 self.n_children, self.gen, self.key, self.tree,
                                 int(self.counts[0]), self._cum, self._offsets, self._marks)

    def children(self, u: int) -> np.ndarray:
        fc = self.first_child[u]
        if fc < 0:
            return np.zeros(0, dtype=np.int64)
        return np.arange(fc, fc + self.n_children[u], dtype=np.int64)

    def root(self, j: int = 0) -> int:
        while j >= self.n_roots:
            if self.closed:
                raise IndexError("hand-built arena has no such root")
            if j >= self.roots.shape[0]:
                self._grow_roots()
            self._add_root()
        return int(self.roots[j])

    @classmethod
    def from_parents(cls, parents, marks) -> tuple["TreeArena", np.ndarray]:
        """Hand-built forest from a parent list (-1 for roots) and absolute marks.

        Returns the arena and the map from input index to arena id.  Children
        keep their relative input order; roots must carry mark 0.
        """
        parents = np.asarray(parents, dtype=np.int64)
        marks = np.asarray(marks, dtype=np.float64)
        n = parents.shape[0]
        kids = [[] for _ in range(n)]
        root_list = []
        for i, p in enumerate(parents):
            if p < 0:
                if marks[i] != 0.0:
                    raise ValueError("roots must carry mark 0")
                root_list.append(i)
            else:
                kids[p].append(i)
        arena = cls(None, capacity=max(n, 16))
        new_id = np.full(n, -1, dtype=np.int64)
        nv = 0
        for i in root_list:
            new_id[i] = nv
            nv += 1
        queue = list(root_list)
        head = 0
        while head < len(queue):
            u = queue[head]
            head += 1
            for c in kids[u]:
                new_id[c] = nv
                nv += 1
                queue.append(c)
        if nv != n:
            raise ValueError("parent list does not describe a forest")
        arena.counts[0] = n
        arena.counts[1] = len(root_list)
        arena.roots = np.array(new_id[root_list] if root_list else [], dtype=np.int64)
        for j, i in enumerate(root_list):
            arena.tree[new_id[i]] = j
        for u in queue:
            a = new_id[u]
            p = parents[u]
            arena.parent[a] = -1 if p < 0 else new_id[p]
            arena.V[a] = marks[u]
            arena.gen[a] = 0 if p < 0 else arena.gen[new_id[p]] + 1
            if p >= 0:
                arena.tree[a] = arena.tree[new_id[p]]
                arena.w[a] = np.exp(-(marks[u] - marks[p]))
            else:
                arena.w[a] = 1.0
            ks = [new_id[c] for c in kids[u]]
            arena.first_child[a] = ks[0] if ks else nv
            arena.n_children[a] = len(ks)
        for u in queue:
            a = new_id[u]
            ks = arena.children(a)
            arena.wsum[a] = 1.0 + float(arena.w[ks].sum()) if ks.size else 1.0
        return arena, new_id


@dataclass
class WalkTrace:
    steps: np.ndarray
    mode: str

    def __len__(self):
        return self.steps.shape[0]

    def prefix(self, n: int) -> "WalkTrace":
        return WalkTrace(self.steps[: n + 1], self.mode)


@dataclass
class LocalTimeField:
    """beta[v] = number of parent-to-v crossings; roots carry their entry count."""

    beta: np.ndarray

    def __getitem__(self, v):
        return self.beta[v]


def step_distribution(arena: TreeArena, u: int, mode: str = "tree_reflected") -> list[tuple[int, float]]:
    """Transition probabilities out of u, parent move first."""
    if u == ARTIFICIAL_PARENT:
        return [(arena.root(0), 1.0)]
    arena.expand(u)
    p = int(arena.parent[u])
    if p < 0:
        p = ARTIFICIAL_PARENT if mode == "tree_reflected" else arena.root(int(arena.tree[u]) + 1)
    kids = arena.children(u)
    weights = np.concatenate([[1.0], arena.w[kids]])
    probs = weights / weights.sum()
    if probs.size > 1:
        probs[-1] = 1.0 - probs[:-1].sum()
    else:
        probs[0] = 1.0
    return [(p, float(probs[0]))] + [(int(c), float(q)) for c, q in zip(kids, probs[1:])]


def run_walk(arena: TreeArena, n_steps: int, mode: str = "tree_reflected", seed=0,
             start: int | None = None) -> WalkTrace:
    """Trace of length n_steps + 1 started at ``start`` (default: the first root)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    trace = np.empty(n_steps + 1, dtype=np.int64)
    trace[0] = arena.root(0) if start is None else start
    _advance(arena, trace, 0, n_steps, mode == "forest", key64(seed))
    return WalkTrace(trace, mode)


def _advance(arena: TreeArena, trace: np.ndarray, s0: int, n_steps: int, forest: bool, walk_key):
    s = s0
    while True:
        s, status = _walk_kernel(arena.parent, arena.V, arena.w, arena.wsum, arena.first_child,
                                 arena.n_children, arena.gen, arena.key, arena.tree,
                                 arena.roots, arena.counts, arena.env_key, arena._cum,
                                 arena._offsets, arena._marks, arena.closed,
                                 trace, s, n_steps, forest, walk_key, arena.vertex_budget)
        if status == _DONE:
            return
        if status == _NEED_SPACE:
            arena._reserve(max(arena.capacity, arena.model.max_offspring + 2))
            if arena.n_roots + 1 >= arena.roots.shape[0]:
                arena._grow_roots()
        elif status == _BUDGET:
            raise VertexBudgetExceeded(f"arena would exceed {arena.vertex_budget} vertices")
        else:
            raise ValueError("walk left the hand-built arena")


def edge_local_times(trace: WalkTrace, arena: TreeArena) -> LocalTimeField:
    """Downward crossing counts.

    Roots of a forest walk carry 1.  In tree mode the root carries the number
    of entries from the artificial parent, counting the start as the first.
    """
    steps = trace.steps
    beta = np.zeros(arena.n_vertices, dtype=np.int64)
    if steps.shape[0] > 1:
        prev, nxt = steps[:-1], steps[1:]
        ok = (nxt >= 0) & (prev >= 0)
        down = ok.copy()
        down[ok] = arena.parent[nxt[ok]] == prev[ok]
        beta += np.bincount(nxt[down], minlength=arena.n_vertices)
    visited_roots = np.unique(steps[(steps >= 0)])
    visited_roots = visited_roots[arena.parent[visited_roots] < 0]
    if trace.mode == "tree_reflected":
        r = arena.root(0)
        beta[r] = 1 + int(np.count_nonzero((steps[:-1] == ARTIFICIAL_PARENT) & (steps[1:] == r)))
    else:
        beta[visited_roots] = 1
    return LocalTimeField(beta)


def excursion_times(trace: WalkTrace, root: int = 0) -> list[int]:
    """Entry times T_1 = 0 < T_2 < ... of the root from its artificial parent."""
    if trace.mode != "tree_reflected":
        raise ValueError("excursion times are defined for the reflected tree walk")
    s = trace.steps
    hits = np.nonzero((s[:-1] == ARTIFICIAL_PARENT) & (s[1:] == root))[0] + 1
    return [0] + [int(t) for t in hits]


def walk_range(trace: WalkTrace) -> np.ndarray:
    """Sorted ids of the visited vertices (the artificial parent excluded)."""
    s = trace.steps
    return np.unique(s[s >= 0])


def complete_prefix(trace: WalkTrace, arena: TreeArena) -> WalkTrace:
    """Forest-walk prefix covering only trees the walk has left for good."""
    if trace.mode != "forest":
        raise ValueError("complete_prefix expects a forest walk")
    s = trace.steps
    jumps = np.nonzero((arena.parent[s[1:]] < 0) & (arena.tree[s[1:]] != arena.tree[s[:-1]]))[0]
    if jumps.size == 0:
        return WalkTrace(s[:0], "forest")
    return WalkTrace(s[: jumps[-1] + 1], "forest")


def write_trace_csv(path, trace: WalkTrace, arena: TreeArena):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["step", "vertex", "generation"])
        for n, v in enumerate(trace.steps):
            out.writerow([n, int(v), -1 if v < 0 else int(arena.gen[v])])


def write_local_times_csv(path, beta: LocalTimeField, arena: TreeArena):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["vertex", "generation", "beta"])
        for v in np.nonzero(beta.beta)[0]:
            out.writerow([int(v), int(arena.gen[v]), int(beta.beta[v])])

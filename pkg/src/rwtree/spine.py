"""Multitype change of measure and the spinal samplers.

Exact quantities for finitely atomed models:

* mean matrix m(i, j) = C(i+j-1, j) E[sum_u x_u^j / (1 + x_u)^(i+j)], x_u = exp(-V(u));
* transitions of the type chain along the spine,
  phat(i, j) = C(i+j-1, i) E[sum_u x_u^j / (1 + x_u)^(i+j)] = (j / i) m(i, j).

Monte Carlo quantities:

* the eigenvectors a_i, b_i and the invariant measure pi_i = a_i b_i, all
  functionals of the perpetuity X = sum_{k>=1} exp(-S_k) of the size-biased
  random walk S;
* spine samples, in two versions: the killed-walk construction (two walks
  launched from every spine vertex, killed on reaching the spine vertex
  below) and the branching recursion of the spine's types, where the type
  of w_{k+1} minus one is negative binomial given the type of w_k.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import gammaln

from .env import EnvironmentModel, HYP_TOL, psi
from .parallel import map_jobs
from .reduce import _children_counts, _split
from .rng import job_seeds, mt_seed
from .walk import TreeArena


class PreconditionError(ValueError):
    """The model does not satisfy psi(1) = 1."""


def _require_critical(model: EnvironmentModel):
    if abs(psi(model, 1.0) - 1.0) > HYP_TOL:
        raise PreconditionError("psi(1) must equal 1")


# Exact cells.

def _log_moment(model: EnvironmentModel, i: int, j: int) -> float:
    """log E[sum_u x^j / (1 + x)^(i+j)]."""
    marks, w = model.intensity()
    keep = w > 0
    marks, w = marks[keep], w[keep]
    terms = np.log(w) - j * marks - (i + j) * np.logaddexp(0.0, -marks)
    top = terms.max()
    return float(top + np.log(np.sum(np.exp(terms - top))))


def _log_binom(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def mean_matrix(model: EnvironmentModel, i: int, j: int) -> float:
    if i < 1 or j < 1:
        raise ValueError("types start at 1")
    return math.exp(_log_binom(i + j - 1, j) + _log_moment(model, i, j))


def phat(model: EnvironmentModel, i: int, j: int) -> float:
    if i < 1 or j < 1:
        raise ValueError("types start at 1")
    return math.exp(_log_binom(i + j - 1, i) + _log_moment(model, i, j))


def log_phat_row(model: EnvironmentModel, i: int, js: np.ndarray) -> np.ndarray:
    """log phat(i, j) for an array of j, vectorized over marks and j."""
    marks, w = model.intensity()
    keep = w > 0
    marks, w = marks[keep], w[keep]
    js = np.asarray(js, dtype=float)
    lb = gammaln(i + js) - gammaln(i + 1) - gammaln(js)
    terms = (np.log(w)[None, :] - js[:, None] * marks[None, :]
             - (i + js)[:, None] * np.logaddexp(0.0, -marks)[None, :])
    top = terms.max(axis=1, keepdims=True)
    return lb + (top[:, 0] + np.log(np.sum(np.exp(terms - top), axis=1)))


def phat_row(model: EnvironmentModel, i: int, tol: float = 1e-13, j_max: int = 10**7):
    """(row, tail bound): phat(i, 1..J) with the mass beyond J bounded by tail bound.

    For a single mark the terms in j are a negative binomial law shifted by
    one; their successive ratios decrease to x / (1 + x) < 1, so once the
    ratio of every mark is below 1 the remainder is dominated by a
    geometric series.
    """
    marks, w = model.intensity()
    q = np.exp(-marks) / (1 + np.exp(-marks))
    qmax = float(q[w > 0].max())
    # ratio at j: q (i + j) / j
    J = 64
    while True:
        js = np.arange(1, J + 1)
        row = np.exp(log_phat_row(model, i, js))
        ratio = qmax * (i + J) / J
        if ratio < 1:
            tail = row[-1] * ratio / (1 - ratio) * len(marks)
            if tail < tol or J >= j_max:
                return row, float(tail)
        if J >= j_max:
            return row, math.inf
        J *= 2


# Size-biased random walk and eigenvectors.

def step_law(model: EnvironmentModel) -> tuple[np.ndarray, np.ndarray]:
    """Support and probabilities of the size-biased step."""
    _require_critical(model)
    marks, w = model.intensity()
    p = w * np.exp(-marks)
    vals, inv = np.unique(marks, return_inverse=True)
    probs = np.bincount(inv, weights=p)
    keep = probs > 0
    vals, probs = vals[keep], probs[keep]
    return vals, probs / probs.sum()


def sample_S_hat(model: EnvironmentModel, n_steps: int, seed) -> np.ndarray:
    """Path (S_0 = 0, S_1, ..., S_n) of the size-biased random walk."""
    vals, probs = step_law(model)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)) if not isinstance(
        seed, np.random.SeedSequence) else seed)
    steps = rng.choice(vals, size=n_steps, p=probs)
    return np.concatenate([[0.0], np.cumsum(steps)])


@njit(cache=True, nogil=True)
def _perpetuity_batch(n, vals, cum, level, max_steps, seed, out, steps_out):
    np.random.seed(seed)
    for s in range(n):
        S = 0.0
        X = 0.0
        k = 0
        while S < level and k < max_steps:
            a = np.searchsorted(cum, np.random.random(), side="right")
            if a >= cum.shape[0]:
                a = cum.shape[0] - 1
            S += vals[a]
            X += np.exp(-S)
            k += 1
        out[s] = X
        steps_out[s] = k


def stopping_level(model: EnvironmentModel, tol: float = 1e-10) -> tuple[float, float]:
    """Level L such that stopping the perpetuity when S first exceeds L
    leaves a remainder R with E[min(R, 1)] <= tol.

    Uses E[min(R, 1)] <= E[R^t] <= exp(-t L) psi(1+t) / (1 - psi(1+t)) for
    t in (0, 1] with psi(1+t) < 1.
    """
    best = (math.inf, math.nan)
    for t in np.linspace(0.01, 1.0, 100):
        p = psi(model, 1.0 + t)
        if p >= 1:
            continue
        L = (math.log(p / (1 - p)) - math.log(tol)) / t
        if L < best[0]:
            best = (L, t)
    if not math.isfinite(best[0]):
        raise PreconditionError("no t in (0, 1] with psi(1+t) < 1")
    return max(best[0], 0.0), best[1]


def sample_perpetuity(model: EnvironmentModel, n: int, seed, tol: float = 1e-10,
                      jobs: int = 16, workers: int = 1, max_steps: int = 10**7):
    """Samples of X = sum_{k>=1} exp(-S_k), the mean number of steps used,
    and the stopping level."""
    vals, probs = step_law(model)
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    level, _ = stopping_level(model, tol)
    sizes = _split(n, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        out = np.empty(sizes[j])
        st = np.empty(sizes[j], dtype=np.int64)
        _perpetuity_batch(sizes[j], vals, cum, level, max_steps, mt_seed(seeds[j]), out, st)
        return out, st

    res = map_jobs(one, range(len(sizes)), workers)
    X = np.concatenate([r[0] for r in res])
    steps = np.concatenate([r[1] for r in res])
    return X, float(steps.mean()), level


@dataclass
class EigenData:
    a: np.ndarray
    b: np.ndarray
    pi: np.ndarray
    se_a: np.ndarray
    se_b: np.ndarray
    se_pi: np.ndarray
    I_max: int
    stop_level: float
    mean_steps: float
    replicates: int
    truncation_bound: float
    X: np.ndarray = field(repr=False)

    def index(self, i: int) -> int:
        return i - 1

    @property
    def mu(self) -> float:
        return 1.0 / self.pi[0]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["i", "a_i", "b_i", "pi_i", "stderr_a", "stderr_b", "stderr_pi"])
            for k in range(self.I_max):
                out.writerow([k + 1] + [f"{float(v):.17g}" for v in
                                        (self.a[k], self.b[k], self.pi[k], self.se_a[k],
                                         self.se_b[k], self.se_pi[k])])


def eigen_functionals(X: np.ndarray, I_max: int) -> np.ndarray:
    """Matrix F[s, i-1] = X_s^(i-1) / (1 + X_s)^(i+1), i = 1..I_max."""
    X = np.asarray(X, dtype=float)[:, None]
    i = np.arange(1, I_max + 1)[None, :]
    with np.errstate(divide="ignore"):
        logx = np.where(X > 0, np.log(np.where(X > 0, X, 1.0)), -np.inf)
    F = np.exp((i - 1) * logx - (i + 1) * np.log1p(X))
    F[:, 0] = 1.0 / (1.0 + X[:, 0]) ** 2
    return F


def estimate_eigen(model: EnvironmentModel, I_max: int = 50, replicates: int = 100_000,
                   seed=0, tol: float = 1e-10, workers: int = 1) -> EigenData:
    """Monte Carlo a_i, b_i, pi_i with delta-method standard errors."""
    X, mean_steps, level = sample_perpetuity(model, replicates, seed, tol, workers=workers)
    n = X.shape[0]
    g = 1.0 / (1.0 + X)
    F = eigen_functionals(X, I_max)
    Eg = g.mean()
    EF = F.mean(axis=0)
    i = np.arange(1, I_max + 1)
    a = EF / Eg
    b = i * Eg
    pi = i * EF
    se_g = g.std(ddof=1) / math.sqrt(n)
    se_b = i * se_g
    se_pi = i * F.std(axis=0, ddof=1) / math.sqrt(n)
    resid = (F - a[None, :] * g[:, None]) / Eg
    se_a = resid.std(axis=0, ddof=1) / math.sqrt(n)
    bound = tol * max(1, I_max - 1)
    return EigenData(a, b, pi, se_a, se_b, se_pi, I_max, level, mean_steps, n, bound, X)


# Spine samplers.

@njit(cache=True)
def _pick(cum):
    a = np.searchsorted(cum, np.random.random(), side="right")
    if a >= cum.shape[0]:
        a = cum.shape[0] - 1
    return a


@njit(cache=True)
def _spine_env(depth, sb_cum, offsets, marks, disp, nchild, spine_idx):
    """Children displacements of w_0..w_{depth-1} under the size-biased law,
    and the index of the spine child, chosen with weight exp(-V)."""
    for k in range(depth):
        a = _pick(sb_cum)
        lo = offsets[a]
        c = offsets[a + 1] - lo
        nchild[k] = c
        tot = 0.0
        for i in range(c):
            disp[k, i] = marks[lo + i]
            tot += np.exp(-marks[lo + i])
        u = np.random.random() * tot
        acc = 0.0
        spine_idx[k] = c - 1
        for i in range(c):
            acc += np.exp(-disp[k, i])
            if u < acc:
                spine_idx[k] = i
                break


@njit(cache=True)
def _killed_walks(depth, disp, nchild, spine_idx, budget, y_spine, y_bro):
    """Two walks from each w_i (i < depth), killed on reaching w_{i-1}.

    Excursions into brothers, and above w_depth, return to their starting
    vertex almost surely and only their first crossing matters, so they are
    collapsed into a single counted crossing.  Returns the number of moves,
    or -1 when the budget is exhausted.
    """
    total = 0
    for i in range(depth):
        for rep in range(2):
            j = i
            steps = 0
            while True:
                if j == depth:
                    j -= 1
                    steps += 1
                    continue
                c = nchild[j]
                tot = 1.0
                for q in range(c):
                    tot += np.exp(-disp[j, q])
                u = np.random.random() * tot
                steps += 1
                if steps > budget:
                    return -1
                if u < 1.0:
                    if j == i:
                        break
                    j -= 1
                    continue
                acc = 1.0
                pick = c - 1
                for q in range(c):
                    acc += np.exp(-disp[j, q])
                    if u < acc:
                        pick = q
                        break
                if pick == spine_idx[j]:
                    y_spine[j + 1] += 1
                    j += 1
                else:
                    y_bro[j, pick] += 1
            total += steps
    return total


@njit(cache=True)
def _line_L1(b, cap, cum, offsets, marks, cm, cc):
    """|L1| of a vertex with local time b >= 2 (strict descendants), or the
    first count above cap."""
    cap = 256
    sb = np.empty(cap, dtype=np.int64)
    top = 1
    sb[0] = b
    L1 = 0
    while top > 0:
        top -= 1
        c = _children_counts(sb[top], cum, offsets, marks, cm, cc)
        for i in range(c):
            k = cc[i]
            if k == 1:
                L1 += 1
                if L1 > cap:
                    return L1
            elif k > 1:
                if top == cap:
                    cap *= 2
                    nb = np.empty(cap, dtype=np.int64)
                    nb[:top] = sb[:top]
                    sb = nb
                sb[top] = k
                top += 1
    return L1


@njit(cache=True, nogil=True)
def _spine_batch(n, depth, method, start, sb_cum, cum, offsets, marks, budget, L1_cap, seed,
                 phi, Vs, nbro, bro_disp, bro_y, L1, tau, steps_out):
    """method 0: killed walks (start type 1); method 1: branching recursion
    of the types from ``start``."""
    np.random.seed(seed)
    maxc = 1
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    disp = np.zeros((depth, maxc))
    nchild = np.zeros(depth, dtype=np.int64)
    spine_idx = np.zeros(depth, dtype=np.int64)
    y_spine = np.zeros(depth + 1, dtype=np.int64)
    y_bro = np.zeros((depth, maxc), dtype=np.int64)
    cm = np.empty(maxc)
    cc = np.empty(maxc, dtype=np.int64)
    for s in range(n):
        _spine_env(depth, sb_cum, offsets, marks, disp, nchild, spine_idx)
        y_spine[:] = 0
        y_bro[:, :] = 0
        if method == 0:
            st = _killed_walks(depth, disp, nchild, spine_idx, budget, y_spine, y_bro)
        else:
            st = 0
            for k in range(depth):
                g = np.random.gamma(y_spine[k] + 2.0 if k > 0 else start + 1.0, 1.0)
                for q in range(nchild[k]):
                    cnt = np.random.poisson(g * np.exp(-disp[k, q]))
                    if q == spine_idx[k]:
                        y_spine[k + 1] = cnt
                    else:
                        y_bro[k, q] = cnt
        steps_out[s] = st
        if st < 0:
            tau[s] = -2
            continue
        phi[s, 0] = start
        Vs[s, 0] = 0.0
        t = -1
        for k in range(depth):
            phi[s, k + 1] = y_spine[k + 1] + 1
            Vs[s, k + 1] = Vs[s, k] + disp[k, spine_idx[k]]
            nb = 0
            for q in range(nchild[k]):
                if q != spine_idx[k]:
                    bro_disp[s, k, nb] = disp[k, q]
                    bro_y[s, k, nb] = y_bro[k, q]
                    nb += 1
            nbro[s, k] = nb
            if t < 0 and phi[s, k + 1] == 1:
                t = k + 1
        tau[s] = t
        if t < 0:
            L1[s] = -1
            continue
        tot = 1
        for k in range(t):
            for q in range(nbro[s, k]):
                if tot > L1_cap:
                    break
                b = bro_y[s, k, q]
                if b == 1:
                    tot += 1
                elif b > 1:
                    tot += _line_L1(b, L1_cap - tot, cum, offsets, marks, cm, cc)
        L1[s] = min(tot, L1_cap + 1)


@dataclass
class SpineBatch:
    """Spine samples; row s describes one sample.

    phi[s, k] is the type of w_k (phi[s, 0] = 1), V[s, k] its mark,
    nbro[s, k] the number of brothers of w_{k+1} with displacements
    bro_disp and local times bro_y, tau the first k >= 1 with phi = 1
    (-1 if not reached within depth, -2 for discarded samples) and L1 the
    optional line size read off the spine (-1 when tau is not reached).
    """

    phi: np.ndarray
    V: np.ndarray
    nbro: np.ndarray
    bro_disp: np.ndarray
    bro_y: np.ndarray
    L1: np.ndarray
    tau: np.ndarray
    steps: np.ndarray
    method: str

    @property
    def kept(self) -> np.ndarray:
        return self.tau != -2

    @property
    def discarded(self) -> int:
        return int(np.count_nonzero(self.tau == -2))

    def __len__(self):
        return self.phi.shape[0]

    def write_csv(self, path, sample: int = 0):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["k", "V", "y", "n_brothers"])
            depth = self.phi.shape[1] - 1
            for k in range(depth + 1):
                nb = int(self.nbro[sample, k - 1]) if k > 0 else 0
                out.writerow([k, f"{float(self.V[sample, k]):.17g}", int(self.phi[sample, k]), nb])


SPINE_METHODS = {"killed_walks": 0, "recursion": 1}


def sample_spines(model: EnvironmentModel, depth: int, n: int, seed, method: str = "killed_walks",
                  walk_budget: int = 10**7, jobs: int = 16, workers: int = 1,
                  start_type: int = 1, L1_cap: int = 10**6) -> SpineBatch:
    """Spine samples to the given depth.  The recursion accepts any start
    type; the killed walks describe the spine from type 1.

    Under the size-biased law |L1| has infinite mean, and so has the cost
    of counting it; counts above ``L1_cap`` are stored as L1_cap + 1.
    """
    _require_critical(model)
    if method not in SPINE_METHODS:
        raise ValueError(f"method must be one of {tuple(SPINE_METHODS)}")
    if start_type < 1 or (method == "killed_walks" and start_type != 1):
        raise ValueError("killed walks start from type 1")
    sb_cum, offsets, marks = model.size_biased_tables()
    cum, _, _ = model.tables()
    maxc = model.max_offspring
    sizes = _split(n, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        m = sizes[j]
        arrs = (np.zeros((m, depth + 1), np.int64), np.zeros((m, depth + 1)),
                np.zeros((m, depth), np.int64), np.zeros((m, depth, max(maxc - 1, 1))),
                np.zeros((m, depth, max(maxc - 1, 1)), np.int64), np.zeros(m, np.int64),
                np.zeros(m, np.int64), np.zeros(m, np.int64))
        _spine_batch(m, depth, SPINE_METHODS[method], start_type, sb_cum, cum, offsets, marks,
                     walk_budget // 2, L1_cap, mt_seed(seeds[j]), *arrs)
        return arrs

    res = map_jobs(one, range(len(sizes)), workers)
    cat = [np.concatenate([r[k] for r in res]) for k in range(8)]
    return SpineBatch(*cat, method=method)


@dataclass
class SpineSample:
    V: np.ndarray
    phi: np.ndarray
    brothers: list
    tau: int
    L1: int
    steps: int


def sample_spine(model: EnvironmentModel, depth: int, walk_budget: int = 10**7, seed=0) -> SpineSample:
    """One killed-walk spine sample."""
    b = sample_spines(model, depth, 1, seed, "killed_walks", walk_budget, jobs=1)
    if b.discarded:
        raise RuntimeError("killed walks exceeded the step budget")
    bros = [list(zip(b.bro_disp[0, k, : b.nbro[0, k]].tolist(), b.bro_y[0, k, : b.nbro[0, k]].tolist()))
            for k in range(depth)]
    return SpineSample(b.V[0], b.phi[0], bros, int(b.tau[0]), int(b.L1[0]), int(b.steps[0]))


@njit(cache=True, nogil=True)
def _chain_batch(n, max_steps, r, sb_cum, offsets, marks, seed, out):
    """Type chain along the spine from type 1 until it returns to 1.

    Columns: tau, sum_{k<=tau} 1/phi_k, sum_{k<=tau} r^k, censored flag.
    """
    np.random.seed(seed)
    for s in range(n):
        phi = 1
        k = 0
        inv = 0.0
        rs = 0.0
        while True:
            a = _pick(sb_cum)
            lo = offsets[a]
            c = offsets[a + 1] - lo
            tot = 0.0
            for i in range(c):
                tot += np.exp(-marks[lo + i])
            u = np.random.random() * tot
            acc = 0.0
            d = marks[lo + c - 1]
            for i in range(c):
                acc += np.exp(-marks[lo + i])
                if u < acc:
                    d = marks[lo + i]
                    break
            # marginal of the spine child's count in NegMult(phi + 1)
            g = np.random.gamma(phi + 1.0, 1.0)
            phi = np.random.poisson(g * np.exp(-d)) + 1
            k += 1
            inv += 1.0 / phi
            rs += r ** k
            if phi == 1 or k >= max_steps:
                break
        out[s, 0] = k
        out[s, 1] = inv
        out[s, 2] = rs
        out[s, 3] = 1.0 if phi != 1 else 0.0


def sample_type_chain(model: EnvironmentModel, n: int, seed, r: float = 0.5,
                      max_steps: int = 10**6, jobs: int = 16, workers: int = 1) -> dict:
    """Excursions of the spine type chain away from 1 (branching recursion)."""
    _require_critical(model)
    sb_cum, offsets, marks = model.size_biased_tables()
    sizes = _split(n, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        out = np.zeros((sizes[j], 4))
        _chain_batch(sizes[j], max_steps, r, sb_cum, offsets, marks, mt_seed(seeds[j]), out)
        return out

    res = np.concatenate(map_jobs(one, range(len(sizes)), workers))
    return {"tau": res[:, 0], "sum_inv_phi": res[:, 1], "sum_r": res[:, 2],
            "censored": res[:, 3].astype(bool)}


# Martingales.

@dataclass
class MartingaleSeries:
    Z: np.ndarray
    W: np.ndarray
    depth: int

    @property
    def W_inf_proxy(self) -> float:
        return float(self.W[-1])


def martingales(arena: TreeArena, beta, depth: int) -> MartingaleSeries:
    """Z_n = sum over generation n of beta and W_k = sum over generation k of
    exp(-V), for n, k = 0..depth; the arena is expanded to that depth."""
    frontier = [arena.root(0)]
    for _ in range(depth):
        nxt = []
        for u in frontier:
            arena.expand(u)
            nxt.extend(arena.children(u).tolist())
        frontier = nxt
    n = arena.n_vertices
    gen = arena.gen[:n]
    tree0 = arena.tree[:n] == 0
    bvals = np.asarray(beta.beta if hasattr(beta, "beta") else beta)
    bfull = np.zeros(n, dtype=np.int64)
    bfull[: bvals.shape[0]] = bvals[:n]
    Z = np.array([bfull[tree0 & (gen == g)].sum() for g in range(depth + 1)])
    W = np.array([np.exp(-arena.V[:n][tree0 & (gen == g)]).sum() for g in range(depth + 1)])
    return MartingaleSeries(Z, W, depth)


@njit(cache=True, nogil=True)
def _Z_batch(n, n_gen, i0, cum, offsets, marks, seed, out):
    np.random.seed(seed)
    maxc = 1
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    cm = np.empty(maxc)
    cc = np.empty(maxc, dtype=np.int64)
    cap = 1024
    sb = np.empty(cap, dtype=np.int64)
    sd = np.empty(cap, dtype=np.int64)
    for s in range(n):
        for g in range(n_gen + 1):
            out[s, g] = 0
        out[s, 0] = i0
        top = 1
        sb[0] = i0
        sd[0] = 0
        while top > 0:
            top -= 1
            b = sb[top]
            d = sd[top]
            if d == n_gen:
                continue
            c = _children_counts(b, cum, offsets, marks, cm, cc)
            if top + c > cap:
                cap = 2 * (top + c)
                nb = np.empty(cap, dtype=np.int64)
                nd = np.empty(cap, dtype=np.int64)
                nb[:top] = sb[:top]
                nd[:top] = sd[:top]
                sb = nb
                sd = nd
            for i in range(c):
                if cc[i] > 0:
                    out[s, d + 1] += cc[i]
                    sb[top] = cc[i]
                    sd[top] = d + 1
                    top += 1


def sample_Z(model: EnvironmentModel, n_gen: int, n: int, seed, start_type: int = 1,
             jobs: int = 16, workers: int = 1) -> np.ndarray:
    """Rows (Z_0, ..., Z_{n_gen}) of independent trees under P_i."""
    cum, offsets, marks = model.tables()
    sizes = _split(n, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        out = np.zeros((sizes[j], n_gen + 1), dtype=np.int64)
        _Z_batch(sizes[j], n_gen, start_type, cum, offsets, marks, mt_seed(seeds[j]), out)
        return out

    return np.concatenate(map_jobs(one, range(len(sizes)), workers))


@njit(cache=True)
def _W_tree(k, cum, offsets, marks, buf_a, buf_b):
    """W_k of one environment tree, generation by generation."""
    cur = buf_a
    nxt = buf_b
    cur[0] = 0.0
    size = 1
    for g in range(k):
        m = 0
        for t in range(size):
            a = _pick(cum)
            lo = offsets[a]
            for i in range(offsets[a + 1] - lo):
                nxt[m] = cur[t] + marks[lo + i]
                m += 1
        cur, nxt = nxt, cur
        size = m
        if size == 0:
            return 0.0
    tot = 0.0
    for t in range(size):
        tot += np.exp(-cur[t])
    return tot


@njit(cache=True, nogil=True)
def _W_batch(n, k, cum, offsets, marks, seed, size_biased, sb_cum, out):
    np.random.seed(seed)
    maxc = 1
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    cap = maxc ** k + 1
    buf_a = np.empty(cap)
    buf_b = np.empty(cap)
    for s in range(n):
        if not size_biased:
            out[s] = _W_tree(k, cum, offsets, marks, buf_a, buf_b)
            continue
        # spine decomposition: W_k = sum_j exp(-V(w_j)) sum_{brothers b of w_{j+1}}
        # exp(-d_b) W^(b)_{k-j-1} + exp(-V(w_k))
        V = 0.0
        tot = 0.0
        for j in range(k):
            a = _pick(sb_cum)
            lo = offsets[a]
            c = offsets[a + 1] - lo
            wt = 0.0
            for i in range(c):
                wt += np.exp(-marks[lo + i])
            u = np.random.random() * wt
            acc = 0.0
            sp = c - 1
            for i in range(c):
                acc += np.exp(-marks[lo + i])
                if u < acc:
                    sp = i
                    break
            for i in range(c):
                if i != sp:
                    tot += np.exp(-(V + marks[lo + i])) * _W_tree(k - j - 1, cum, offsets, marks, buf_a, buf_b)
            V += marks[lo + sp]
        out[s] = tot + np.exp(-V)


def sample_W(model: EnvironmentModel, k: int, n: int, seed, size_biased: bool = False,
             jobs: int = 16, workers: int = 1) -> np.ndarray:
    """Independent samples of W_k under the plain or the size-biased law."""
    cum, offsets, marks = model.tables()
    sb_cum = model.size_biased_tables()[0] if size_biased else cum
    if model.max_offspring ** k > 5e7:
        raise ValueError("generation too large to enumerate")
    sizes = _split(n, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        out = np.empty(sizes[j])
        _W_batch(sizes[j], k, cum, offsets, marks, mt_seed(seeds[j]), size_biased, sb_cum, out)
        return out

    return np.concatenate(map_jobs(one, range(len(sizes)), workers))


@njit(cache=True)
def _W_population(N, G, cum, sb_cum, offsets, marks, seed, plain, biased):
    """G rounds of W <- sum_i exp(-d_i) W_i on pools of size N, the W_i drawn
    from the previous pool.  The size-biased pool follows the spine: spine
    child from the size-biased pool, brothers from the plain pool."""
    np.random.seed(seed)
    plain[:] = 1.0
    biased[:] = 1.0
    new_p = np.empty(N)
    new_b = np.empty(N)
    for g in range(G):
        for s in range(N):
            a = _pick(cum)
            tot = 0.0
            for i in range(offsets[a], offsets[a + 1]):
                tot += np.exp(-marks[i]) * plain[np.random.randint(N)]
            new_p[s] = tot
            a = _pick(sb_cum)
            lo = offsets[a]
            c = offsets[a + 1] - lo
            wt = 0.0
            for i in range(c):
                wt += np.exp(-marks[lo + i])
            u = np.random.random() * wt
            acc = 0.0
            sp = c - 1
            for i in range(c):
                acc += np.exp(-marks[lo + i])
                if u < acc:
                    sp = i
                    break
            tot = 0.0
            for i in range(c):
                src = biased if i == sp else plain
                tot += np.exp(-marks[lo + i]) * src[np.random.randint(N)]
            new_b[s] = tot
        plain[:] = new_p
        biased[:] = new_b


def sample_W_population(model: EnvironmentModel, depth: int, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Approximate samples of W_depth under the plain and the size-biased law
    by population dynamics on pools of size n.

    Unlike ``sample_W`` the cost is linear in depth, so depths of several
    dozen generations are reachable; the price is mild dependence between
    pool entries.
    """
    cum, offsets, marks = model.tables()
    sb_cum = model.size_biased_tables()[0]
    plain = np.empty(n)
    biased = np.empty(n)
    _W_population(n, depth, cum, sb_cum, offsets, marks, mt_seed(seed), plain, biased)
    return plain, biased


@njit(cache=True, nogil=True)
def _joint_batch(n, i0, K, cum, offsets, marks, seed, out):
    """Pairs (|L1| under P_i0, W_K) sharing one environment tree."""
    np.random.seed(seed)
    maxc = 1
    for a in range(offsets.shape[0] - 1):
        maxc = max(maxc, offsets[a + 1] - offsets[a])
    total = 0
    lvl = 1
    for g in range(K + 1):
        total += lvl
        lvl *= maxc
    Vn = np.empty(total)
    dn = np.empty(total)
    fc = np.empty(total, dtype=np.int64)
    nc = np.empty(total, dtype=np.int64)
    cm = np.empty(maxc)
    cc = np.empty(maxc, dtype=np.int64)
    cap = 1024
    sb = np.empty(cap, dtype=np.int64)
    sv = np.empty(cap, dtype=np.int64)
    sdep = np.empty(cap, dtype=np.int64)
    for s in range(n):
        # environment to depth K, breadth first
        Vn[0] = 0.0
        dn[0] = 0.0
        m = 1
        start = 0
        end = 1
        for g in range(K):
            for t in range(start, end):
                a = _pick(cum)
                lo = offsets[a]
                c = offsets[a + 1] - lo
                fc[t] = m
                nc[t] = c
                for i in range(c):
                    Vn[m] = Vn[t] + marks[lo + i]
                    dn[m] = marks[lo + i]
                    m += 1
            start = end
            end = m
        W = 0.0
        for t in range(start, end):
            W += np.exp(-Vn[t])
        for t in range(start, end):
            nc[t] = -1
        # local times under P_i0 on that environment
        L1 = 0
        top = 1
        sb[0] = i0
        sv[0] = 0
        sdep[0] = 0
        while top > 0:
            top -= 1
            b = sb[top]
            v = sv[top]
            d = sdep[top]
            if d < K:
                c = nc[v]
                g = np.random.gamma(b, 1.0)
                for i in range(c):
                    cc[i] = np.random.poisson(g * np.exp(-dn[fc[v] + i]))
            else:
                c = _children_counts(b, cum, offsets, marks, cm, cc)
            if top + c > cap:
                cap = 2 * (top + c)
                nb = np.empty(cap, dtype=np.int64)
                nv = np.empty(cap, dtype=np.int64)
                nd = np.empty(cap, dtype=np.int64)
                nb[:top] = sb[:top]
                nv[:top] = sv[:top]
                nd[:top] = sdep[:top]
                sb = nb
                sv = nv
                sdep = nd
            for i in range(c):
                k = cc[i]
                if k == 1:
                    L1 += 1
                elif k > 1:
                    sb[top] = k
                    sv[top] = fc[v] + i if d < K else -1
                    sdep[top] = d + 1
                    top += 1
        out[s, 0] = L1
        out[s, 1] = W


def sample_L1_and_W(model: EnvironmentModel, start_type: int, K: int, n: int, seed,
                    jobs: int = 16, workers: int = 1) -> np.ndarray:
    """Rows (|L1| under P_i, W_K) computed on a shared environment."""
    cum, offsets, marks = model.tables()
    if model.max_offspring ** K > 1e7:
        raise ValueError("environment depth too large")
    sizes = _split(n, jobs)
    seeds = job_seeds(seed, len(sizes))

    def one(j):
        out = np.zeros((sizes[j], 2))
        _joint_batch(sizes[j], start_type, K, cum, offsets, marks, mt_seed(seeds[j]), out)
        return out

    return np.concatenate(map_jobs(one, range(len(sizes)), workers))

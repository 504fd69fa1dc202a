"""Environment models: the point process of children displacements.

A model is a finite mixture of atoms; each atom is a probability and the
ordered list of displacements of the children.  Three families are offered:
``lambda_biased`` (m children, all displaced by ln(lambda)), ``two_point``
(a fixed number of children with i.i.d. displacements taking two values) and
``tabulated`` (explicit atoms).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq

PROB_TOL = 1e-12
HYP_TOL = 1e-9
MAX_TWO_POINT_OFFSPRING = 12


class ModelError(ValueError):
    """Invalid model description."""


class InfeasibleError(ValueError):
    """No model satisfies the requested constraints."""


class IndeterminateError(RuntimeError):
    """The sign pattern of psi - 1 could not be established."""


@dataclass(frozen=True)
class EnvironmentModel:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_model(self)

    # constructors
    @classmethod
    def lambda_biased(cls, m: int, lam: float) -> "EnvironmentModel":
        return cls("lambda_biased", {"m": int(m), "lambda": float(lam)})

    @classmethod
    def two_point(cls, offspring: int, mark_low: float, mark_high: float,
                  prob_low: float) -> "EnvironmentModel":
        return cls("two_point", {"offspring": int(offspring), "mark_low": float(mark_low),
                                 "mark_high": float(mark_high), "prob_low": float(prob_low)})

    @classmethod
    def tabulated(cls, atoms) -> "EnvironmentModel":
        clean = tuple((float(p), tuple(float(v) for v in marks)) for p, marks in atoms)
        return cls("tabulated", {"atoms": clean})

    def to_dict(self) -> dict:
        if self.kind == "tabulated":
            return {"kind": "tabulated",
                    "atoms": [[p, list(marks)] for p, marks in self.params["atoms"]]}
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentModel":
        d = dict(d)
        kind = d.pop("kind", None)
        try:
            if kind == "lambda_biased":
                return cls.lambda_biased(d.pop("m"), d.pop("lambda"))
            if kind == "two_point":
                return cls.two_point(d.pop("offspring"), d.pop("mark_low"),
                                     d.pop("mark_high"), d.pop("prob_low"))
            if kind == "tabulated":
                return cls.tabulated(d.pop("atoms"))
        except KeyError as exc:
            raise ModelError(f"missing model field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ModelError(str(exc)) from None
        raise ModelError(f"unknown model kind {kind!r}")

    def __hash__(self):
        return hash((self.kind, repr(sorted(self.params.items()))))

    # tables
    def atoms(self) -> list[tuple[float, np.ndarray]]:
        """Ordered atoms (probability, displacements of the children)."""
        return _atoms(self)

    def intensity(self) -> tuple[np.ndarray, np.ndarray]:
        """(marks, expected number of children carrying that mark)."""
        if self.kind == "lambda_biased":
            return np.array([math.log(self.params["lambda"])]), np.array([float(self.params["m"])])
        if self.kind == "two_point":
            k = self.params["offspring"]
            p = self.params["prob_low"]
            return (np.array([self.params["mark_low"], self.params["mark_high"]]),
                    np.array([k * p, k * (1 - p)]))
        marks, weights = [], []
        for p, v in self.atoms():
            marks.extend(v)
            weights.extend([p] * len(v))
        return np.asarray(marks, float), np.asarray(weights, float)

    def tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat arrays (cumulative probabilities, offsets, marks) for kernels."""
        atoms = self.atoms()
        probs = np.array([p for p, _ in atoms])
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        offsets = np.zeros(len(atoms) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(v) for _, v in atoms])
        marks = np.concatenate([v for _, v in atoms]) if offsets[-1] else np.zeros(0)
        return cum, offsets, marks.astype(np.float64)

    def size_biased_tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tables of the law of N reweighted by sum of exp(-V), renormalized by psi(1)."""
        atoms = self.atoms()
        w = np.array([p * np.exp(-v).sum() for p, v in atoms])
        if w.sum() <= 0:
            raise ModelError("size-biased law undefined: psi(1) = 0")
        cum = np.cumsum(w / w.sum())
        cum[-1] = 1.0
        _, offsets, marks = self.tables()
        return cum, offsets, marks

    @property
    def max_offspring(self) -> int:
        return max(len(v) for _, v in self.atoms())

    @property
    def min_mark(self) -> float:
        marks, w = self.intensity()
        marks = marks[w > 0]
        return float(marks.min()) if marks.size else math.inf


def validate_model(model: EnvironmentModel) -> None:
    p = model.params
    if model.kind == "lambda_biased":
        if not (isinstance(p.get("m"), int) and p["m"] >= 1):
            raise ModelError("lambda_biased needs a positive integer m")
        if not (p.get("lambda", 0) > 0 and math.isfinite(p["lambda"])):
            raise ModelError("lambda_biased needs lambda > 0")
    elif model.kind == "two_point":
        k = p.get("offspring")
        if not (isinstance(k, int) and 1 <= k <= MAX_TWO_POINT_OFFSPRING):
            raise ModelError(f"two_point offspring must be an integer in [1, {MAX_TWO_POINT_OFFSPRING}]")
        if not (0.0 < p.get("prob_low", -1) < 1.0):
            raise ModelError("two_point prob_low must lie strictly inside (0, 1)")
        if not (math.isfinite(p["mark_low"]) and math.isfinite(p["mark_high"])):
            raise ModelError("two_point marks must be finite")
    elif model.kind == "tabulated":
        atoms = p.get("atoms")
        if not atoms:
            raise ModelError("tabulated model needs at least one atom")
        total = 0.0
        for prob, marks in atoms:
            if prob < 0 or not all(math.isfinite(v) for v in marks):
                raise ModelError("atom probabilities must be >= 0 and marks finite")
            total += prob
        if abs(total - 1.0) > PROB_TOL:
            raise ModelError(f"atom probabilities sum to {total!r}, not 1")
    else:
        raise ModelError(f"unknown model kind {model.kind!r}")


def _atoms(model: EnvironmentModel) -> list[tuple[float, np.ndarray]]:
    p = model.params
    if model.kind == "lambda_biased":
        return [(1.0, np.full(p["m"], math.log(p["lambda"])))]
    if model.kind == "two_point":
        k, q = p["offspring"], p["prob_low"]
        out = []
        for pattern in itertools.product((0, 1), repeat=k):
            lows = pattern.count(0)
            prob = q ** lows * (1 - q) ** (k - lows)
            marks = np.array([p["mark_low"] if b == 0 else p["mark_high"] for b in pattern])
            out.append((prob, marks))
        return out
    return [(prob, np.asarray(marks, dtype=float)) for prob, marks in p["atoms"]]


# Laplace transform

def psi(model: EnvironmentModel, t: float) -> float:
    """E[sum over first generation of exp(-t V)]."""
    if t < 0:
        raise ValueError("psi is only evaluated for t >= 0")
    marks, w = model.intensity()
    return float(np.sum(w * np.exp(-t * marks)))


def psi_prime(model: EnvironmentModel, t: float) -> float:
    marks, w = model.intensity()
    return float(-np.sum(w * marks * np.exp(-t * marks)))


def golden_min(f, lo: float, hi: float, tol: float = 1e-10) -> tuple[float, float]:
    """Golden-section search for the minimum of a unimodal f on [lo, hi]."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    candidates = [(f(lo), lo), (f(x), x), (f(hi), hi)]
    fx, x = min(candidates)
    return x, fx


def kappa(model: EnvironmentModel, t_max: float = 64.0) -> float:
    """inf{t > 1 : psi(t) >= 1}; math.inf when psi stays below 1 for ever."""
    if abs(psi(model, 1.0) - 1.0) > HYP_TOL:
        raise ValueError("kappa needs psi(1) = 1")
    f = lambda t: psi(model, t) - 1.0
    if model.min_mark >= 0:
        # every mark is >= 0, so psi is non-increasing on [0, inf)
        if psi_prime(model, 1.0) < 0:
            return math.inf
        raise IndeterminateError("psi is flat at 1")
    t_star, f_star = golden_min(f, 1.0, t_max)
    if f_star >= -HYP_TOL and t_star <= 1.0 + 1e-6:
        # psi increases right after 1 (psi'(1) >= 0)
        return 1.0
    hi = t_star
    while f(hi) < 0:
        hi *= 2
        if hi > 1e6:
            raise IndeterminateError("no sign change of psi - 1 found")
    return float(brentq(f, t_star, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500))


def calibrate_two_point(kappa_target: float, offspring: int = 2,
                        prob_low: float | None = None) -> EnvironmentModel:
    """Two-point model with psi(1) = psi(kappa_target) = 1.

    The free parameter defaults to prob_low = 1 / (5 * offspring).  Any
    value with offspring * prob_low < 1 calibrates; this one keeps the
    type-chain drift ratios at alpha = 0.3 below 1 from type 20 on.
    """
    if not (1.0 < kappa_target <= 2.0):
        raise InfeasibleError("kappa_target must lie in (1, 2]")
    if offspring < 2:
        raise InfeasibleError("offspring must be at least 2")
    k = offspring
    p = 1.0 / (5 * k) if prob_low is None else prob_low
    if not (0 < p < 1.0 / k):
        raise InfeasibleError("prob_low must lie in (0, 1/offspring)")
    # x = exp(-a), y = exp(-b); p x + (1-p) y = 1/k fixes y given x.
    y_of = lambda x: (1.0 / k - p * x) / (1 - p)
    g = lambda x: k * (p * x ** kappa_target + (1 - p) * y_of(x) ** kappa_target) - 1.0
    lo, hi = 1.0 / k, 1.0 / (k * p)
    # g is convex in x with g(lo) < 0 < g(hi); stay off the endpoint y = 0
    hi_in = hi * (1 - 1e-15)
    if not (g(lo) < 0 < g(hi_in)):
        raise InfeasibleError("no sign change in the search box")
    x = brentq(g, lo, hi_in, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    y = y_of(x)
    model = EnvironmentModel.two_point(k, -math.log(x), -math.log(y), p)
    err1 = abs(psi(model, 1.0) - 1)
    errk = abs(psi(model, kappa_target) - 1)
    if max(err1, errk) > 1e-10 or psi_prime(model, 1.0) >= 0:
        raise InfeasibleError("calibration did not reach the 1e-10 tolerance")
    return model


# Hypotheses

@dataclass(frozen=True)
class HypothesisReport:
    m: float
    psi_at_1: float
    psi_prime_at_1: float
    min_psi_on_unit_interval: float
    kappa: float
    psi_at_kappa: float
    hk_moment_finite: tuple[bool, bool, bool]
    non_lattice: bool
    passes_Hc: bool
    passes_Hk: bool

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def is_non_lattice(model: EnvironmentModel, max_den: int = 1000, tol: float = 1e-9) -> bool:
    """Heuristic: marks are lattice when all ratios to one nonzero mark are
    close to rationals with small denominators."""
    marks, w = model.intensity()
    marks = np.unique(marks[w > 0])
    nonzero = marks[np.abs(marks) > tol]
    if nonzero.size == 0:
        return False
    ref = nonzero[0]
    for v in nonzero[1:]:
        r = v / ref
        if abs(r - float(Fraction(r).limit_denominator(max_den))) > tol * max(1.0, abs(r)):
            return True
    return False


def check_hypotheses(model: EnvironmentModel) -> HypothesisReport:
    m = psi(model, 0.0)
    p1 = psi(model, 1.0)
    dp1 = psi_prime(model, 1.0)
    _, psi_min = golden_min(lambda t: psi(model, t), 0.0, 1.0, 1e-10)
    passes_hc = m > 1 and abs(psi_min - 1) <= HYP_TOL and abs(p1 - 1) <= HYP_TOL and dp1 < 0
    kap, psi_k = math.nan, math.nan
    moments = (False, False, False)
    if abs(p1 - 1) <= HYP_TOL:
        try:
            kap = kappa(model)
        except IndeterminateError:
            kap = math.nan
    if math.isfinite(kap):
        psi_k = psi(model, kap)
        m1 = abs(psi_k - 1) <= HYP_TOL
        # finitely many finite atoms: both moments are finite sums
        neg = sum(p * float(np.sum(np.maximum(-v, 0) * np.exp(-kap * v))) for p, v in model.atoms())
        tot = sum(p * float(np.sum(np.exp(-v))) ** kap for p, v in model.atoms())
        moments = (m1, math.isfinite(neg), math.isfinite(tot))
    return HypothesisReport(
        m=m, psi_at_1=p1, psi_prime_at_1=dp1, min_psi_on_unit_interval=psi_min,
        kappa=kap, psi_at_kappa=psi_k, hk_moment_finite=moments,
        non_lattice=is_non_lattice(model), passes_Hc=bool(passes_hc),
        passes_Hk=bool(passes_hc and math.isfinite(kap) and kap > 1 and all(moments)),
    )

"""Hyperbolicity data, the cross-section criterion and the (epsilon, t) feasibility solver.

All criterion arithmetic is carried out on logarithms so that large dimensions or extreme
rates never underflow; margins are reported in nats.  Inequalities are strict: a margin of
exactly zero is a negative verdict.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "InvalidSpecError",
    "HyperbolicSpec",
    "CriterionVerdict",
    "ConstantsLedger",
    "FeasibilityRegion",
    "check_main",
    "check_codim_one",
    "check_reversed",
    "reverse",
    "derive_constants",
    "feasibility",
    "pick_admissible",
]


class InvalidSpecError(ValueError):
    """Raised for hyperbolicity data violating the rate/dimension invariants."""


@dataclass(frozen=True)
class HyperbolicSpec:
    mu_minus: float
    mu_plus: float
    lambda_minus: float
    lambda_plus: float
    c: float
    n_s: int
    n_u: int
    theta: float
    alpha: float | None = None

    def __post_init__(self):
        if not (0 < self.mu_minus <= self.mu_plus < 1 < self.lambda_minus <= self.lambda_plus):
            raise InvalidSpecError("need 0 < mu_minus <= mu_plus < 1 < lambda_minus <= lambda_plus")
        if not all(math.isfinite(x) for x in (self.mu_minus, self.lambda_plus, self.c, self.theta)):
            raise InvalidSpecError("rates must be finite")
        if self.c < 1:
            raise InvalidSpecError("c must be >= 1")
        if int(self.n_s) != self.n_s or int(self.n_u) != self.n_u or self.n_s < 1 or self.n_u < 1:
            raise InvalidSpecError("n_s and n_u must be positive integers")
        if not 0 < self.theta <= 1:
            raise InvalidSpecError("theta must lie in (0, 1]")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise InvalidSpecError("alpha must lie in (0, 1]")
        object.__setattr__(self, "n_s", int(self.n_s))
        object.__setattr__(self, "n_u", int(self.n_u))

    @property
    def n(self) -> int:
        return self.n_s + self.n_u + 1

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "HyperbolicSpec":
        names = {"mu_minus", "mu_plus", "lambda_minus", "lambda_plus", "c", "n_s", "n_u", "theta"}
        missing = names - set(data)
        extra = set(data) - names - {"alpha"}
        if missing or extra:
            raise InvalidSpecError(f"bad spec fields: missing {sorted(missing)}, unknown {sorted(extra)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidSpecError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "HyperbolicSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"not JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidSpecError("spec JSON must be an object")
        return cls.from_dict(data)


class CriterionVerdict(NamedTuple):
    holds: bool
    margin: float  # rhs - lhs of the log inequality, nats

    def __bool__(self) -> bool:
        return self.holds


def _verdict(lhs: float, rhs: float) -> CriterionVerdict:
    margin = rhs - lhs
    return CriterionVerdict(bool(margin > 0), float(margin))


def check_main(spec: HyperbolicSpec) -> CriterionVerdict:
    """``mu_+^((n_s-1)theta) lambda_+^((n_u-1)theta) < mu_-^(2(1-theta))`` in logs."""
    th = spec.theta
    lhs = (spec.n_s - 1) * th * math.log(spec.mu_plus) + (spec.n_u - 1) * th * math.log(spec.lambda_plus)
    rhs = 2.0 * (1.0 - th) * math.log(spec.mu_minus)
    return _verdict(lhs, rhs)


def check_codim_one(spec: HyperbolicSpec) -> CriterionVerdict:
    """Codimension-one form ``mu_+^((n-3)theta) < mu_-^(2(1-theta))``; requires ``n_u == 1``."""
    if spec.n_u != 1:
        raise InvalidSpecError("codimension-one criterion needs n_u == 1")
    th = spec.theta
    return _verdict((spec.n - 3) * th * math.log(spec.mu_plus),
                    2.0 * (1.0 - th) * math.log(spec.mu_minus))


def check_reversed(spec: HyperbolicSpec) -> CriterionVerdict:
    """Time-reversed form ``lambda_+^(2(1-a)) < lambda_-^((n_u-1)a) mu_-^((n_s-1)a)``."""
    if spec.alpha is None:
        raise InvalidSpecError("reversed criterion needs alpha")
    a = spec.alpha
    lhs = 2.0 * (1.0 - a) * math.log(spec.lambda_plus)
    rhs = (spec.n_u - 1) * a * math.log(spec.lambda_minus) + (spec.n_s - 1) * a * math.log(spec.mu_minus)
    return _verdict(lhs, rhs)


def reverse(spec: HyperbolicSpec) -> HyperbolicSpec:
    """Rates of the time-reversed flow; ``alpha`` becomes the working exponent."""
    if spec.alpha is None:
        raise InvalidSpecError("reversing needs alpha")
    return HyperbolicSpec(
        mu_minus=1.0 / spec.lambda_plus, mu_plus=1.0 / spec.lambda_minus,
        lambda_minus=1.0 / spec.mu_plus, lambda_plus=1.0 / spec.mu_minus,
        c=spec.c, n_s=spec.n_u, n_u=spec.n_s, theta=spec.alpha, alpha=spec.theta,
    )


@dataclass(frozen=True)
class ConstantsLedger:
    A: float
    B: float
    C: float
    D: float
    K: float
    L: float
    b: float
    c: float
    n: int
    H: float

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "K", "L", "b", "c", "H"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ledger entry {name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def derive_constants(A: float, B: float, C: float, c: float, L: float, b: float, n: int) -> ConstantsLedger:
    """D = (A+2)C, K = BC and H = 4 max(c^2 D, K L (bc)^(n-3))."""
    for name, val in (("A", A), ("B", B), ("C", C), ("c", c), ("L", L), ("b", b)):
        if not (val > 0 and math.isfinite(val)):
            raise ValueError(f"{name} must be positive and finite, got {val}")
    if n < 3:
        raise ValueError("n must be >= 3")
    D = (A + 2.0) * C
    K = B * C
    log_second = math.log(K) + math.log(L) + (n - 3) * (math.log(b) + math.log(c))
    H = 4.0 * max(c * c * D, math.exp(log_second))
    return ConstantsLedger(A=A, B=B, C=C, D=D, K=K, L=L, b=b, c=c, n=n, H=H)


@dataclass(frozen=True)
class FeasibilityRegion:
    """Admissible pullback times per epsilon.

    ``t_lo`` / ``t_hi`` may be infinite: ``-inf`` when the lower constraint is vacuous and
    ``+inf`` in ``t_lo`` when it can never be met.  ``nonempty_below`` is the supremum of the
    epsilons below which every interval is nonempty, or ``None`` when the region is empty
    for all small epsilon.
    """

    spec: HyperbolicSpec
    H: float
    samples: np.ndarray  # columns: epsilon, t_lo, t_hi
    nonempty: np.ndarray
    nonempty_below: float | None
    degenerate: bool
    criterion_agrees: bool = field(default=True)

    def admissible(self):
        """Rows ``(epsilon, t_lo, t_hi)`` with a nonempty interval."""
        return self.samples[self.nonempty]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "t_lo", "t_hi", "nonempty"])
        for (eps, lo, hi), ok in zip(self.samples, self.nonempty):
            w.writerow([repr(float(eps)), repr(float(lo)), repr(float(hi)), str(bool(ok)).lower()])
        return buf.getvalue()


def _t_bounds(spec: HyperbolicSpec, log_H: float, log_eps: np.ndarray):
    log_eps = np.asarray(log_eps, dtype=float)
    th = spec.theta
    den = (spec.n_s - 1) * math.log(spec.mu_plus) + (spec.n_u - 1) * math.log(spec.lambda_plus)
    num = (1.0 - th) * log_eps - log_H
    t_hi = (log_H + th * log_eps) / (2.0 * math.log(spec.mu_minus))
    degenerate = spec.n_s == 1 and spec.n_u == 1
    if degenerate:
        # first inequality no longer involves t: it holds iff num > 0
        t_lo = np.where(num > 0, -np.inf, np.inf)
    elif den < 0:
        t_lo = num / den
    else:
        # positive exponent: the first inequality caps t instead of bounding it below
        t_lo = np.full_like(log_eps, -np.inf)
        t_hi = np.minimum(t_hi, num / den)
    return t_lo, t_hi, degenerate, den


def _small_eps_threshold(spec: HyperbolicSpec, log_H: float, den: float) -> float | None:
    """log of the supremum epsilon below which the region is nonempty, or None."""
    th = spec.theta
    lm = math.log(spec.mu_minus)
    upper2 = -log_H / th  # t_hi > 0
    if spec.n_s == 1 and spec.n_u == 1 or den > 0:
        # needs (1-theta) log eps > log H for every small eps: only possible when theta == 1
        if th == 1.0 and log_H < 0:
            return min(upper2, 0.0)
        return None
    slope = (1.0 - th) / den - th / (2.0 * lm)
    icpt = -log_H / den - log_H / (2.0 * lm)
    if slope > 0:
        return min(upper2, -icpt / slope, 0.0)
    if slope == 0 and icpt < 0:
        return min(upper2, 0.0)
    return None


def feasibility(spec: HyperbolicSpec, H: float, eps_grid) -> FeasibilityRegion:
    """Intervals ``(t_lo, t_hi)`` on which ``H eps^(theta-1) q^t < 1`` and ``H eps^theta mu_-^(-2t) < 1``.

    Here ``q = mu_+^(n_s-1) lambda_+^(n_u-1)``.  For ``n_s = n_u = 1`` the first inequality is
    independent of ``t`` and the result is flagged ``degenerate``.
    """
    if not H > 0:
        raise ValueError("H must be positive")
    eps = np.asarray(eps_grid, dtype=float)
    if eps.ndim != 1 or np.any((eps <= 0) | (eps >= 1)):
        raise ValueError("eps values must lie in (0, 1)")
    log_H = math.log(H)
    t_lo, t_hi, degenerate, den = _t_bounds(spec, log_H, np.log(eps))
    nonempty = (t_lo < t_hi) & (t_hi > 0)
    threshold = _small_eps_threshold(spec, log_H, den)
    agrees = (threshold is not None) == check_main(spec).holds
    if not agrees:
        warnings.warn("small-epsilon feasibility disagrees with the criterion "
                      "(boundary case or H < 1)", RuntimeWarning, stacklevel=2)
    return FeasibilityRegion(
        spec=spec, H=float(H), samples=np.column_stack([eps, t_lo, t_hi]), nonempty=nonempty,
        nonempty_below=None if threshold is None else math.exp(threshold),
        degenerate=degenerate, criterion_agrees=agrees,
    )


def pick_admissible(region: FeasibilityRegion) -> tuple[float, float]:
    """Choose ``(epsilon, t)`` from a region: the widest interval, ``t`` at its clipped midpoint."""
    rows = region.admissible()
    if len(rows) == 0:
        raise ValueError("feasibility region is empty on the given epsilon grid")
    lo = np.maximum(rows[:, 1], 0.0)
    hi = rows[:, 2]
    width = hi - lo
    i = int(np.argmax(width))
    return float(rows[i, 0]), float(0.5 * (lo[i] + hi[i]))

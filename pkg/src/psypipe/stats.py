"""Correlations, intervals, reliability, and significance tests.

All functions are pure and deterministic given their inputs and seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from statistics import NormalDist
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import special
from scipy.stats import binom, rankdata

from . import kernels
from .errors import (
    BoundaryError,
    DegenerateInputError,
    IncompletenessError,
    RangeError,
    ShapeError,
)
from .psychometrics import DOMAINS


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    p_two_tailed: float
    ci_low: float
    ci_high: float
    method: str = "pearson"
    ci_method: str = "fisher_z"

    def significant(self, threshold: float) -> bool:
        return self.p_two_tailed < threshold


@dataclass(frozen=True)
class ReliabilityResult:
    icc: float
    n_subjects: int
    n_raters: int
    msr: float
    msc: float
    mse: float
    variant: str = "ICC(2,1)"


@dataclass(frozen=True)
class SignificanceConfig:
    alpha: float = 0.05
    m_tests: int = 1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise RangeError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.m_tests < 1:
            raise RangeError(f"m_tests must be >= 1, got {self.m_tests}")

    @property
    def threshold(self) -> float:
        return self.alpha / self.m_tests


class BootstrapResult(NamedTuple):
    mean_r: float
    ci_low: float
    ci_high: float
    redraws: int
    n_resamples: int


def _pair(x: Iterable[float], y: Iterable[float]) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=float).ravel()
    ya = np.asarray(y, dtype=float).ravel()
    if xa.shape != ya.shape:
        raise ShapeError(f"length mismatch: {xa.size} vs {ya.size}")
    if xa.size < 3:
        raise ShapeError(f"need at least 3 paired observations, got {xa.size}")
    if not (np.isfinite(xa).all() and np.isfinite(ya).all()):
        raise ShapeError("inputs contain non-finite values")
    if np.ptp(xa) == 0 or np.ptp(ya) == 0:
        raise DegenerateInputError("correlation undefined for a constant vector")
    return xa, ya


def _product_moment(xa: np.ndarray, ya: np.ndarray) -> float:
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    r = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return min(1.0, max(-1.0, r))


def t_two_tailed_p(t: float, df: float) -> float:
    """Two-tailed Student-t tail probability via the regularized incomplete beta."""
    if df <= 0:
        raise RangeError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def _r_p_value(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    df = n - 2
    t = r * math.sqrt(df / (1.0 - r * r))
    return t_two_tailed_p(t, df)


def fisher_ci(r: float, n: int, level: float = 0.95) -> tuple[float, float]:
    """Confidence interval for a correlation through the Fisher z-transform."""
    if not abs(r) < 1:
        raise BoundaryError(f"Fisher interval undefined at |r| = {abs(r)}")
    if n < 4:
        raise ShapeError(f"Fisher interval needs n >= 4, got {n}")
    if not 0 < level < 1:
        raise RangeError(f"level must lie in (0, 1), got {level}")
    z = math.atanh(r)
    half = NormalDist().inv_cdf(0.5 + level / 2.0) / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


def _interval(r: float, n: int, level: float) -> tuple[float, float]:
    if abs(r) >= 1.0:
        return r, r
    if n < 4:
        return -1.0, 1.0
    return fisher_ci(r, n, level)


def _permutation_p(xa: np.ndarray, ya: np.ndarray, r: float) -> float:
    hits = total = 0
    for perm in permutations(range(len(ya))):
        total += 1
        if abs(_product_moment(xa, ya[list(perm)])) >= abs(r) - 1e-12:
            hits += 1
    return hits / total


def pearson(x, y, level: float = 0.95, exact: bool = False) -> CorrelationResult:
    """Pearson product-moment correlation with t-test p and Fisher-z interval.

    ``exact=True`` replaces the t approximation with a full permutation p
    (only allowed for n < 10). For n = 3 the interval is reported as (-1, 1).
    """
    xa, ya = _pair(x, y)
    n = xa.size
    r = _product_moment(xa, ya)
    if exact:
        if n >= 10:
            raise ShapeError("exact permutation p is limited to n < 10")
        p = _permutation_p(xa, ya, r)
    else:
        p = _r_p_value(r, n)
    lo, hi = _interval(r, n, level)
    return CorrelationResult(r, n, p, lo, hi, "pearson", "fisher_z")


def spearman(x, y, level: float = 0.95) -> CorrelationResult:
    """Pearson correlation of mid-ranked data."""
    xa, ya = _pair(x, y)
    res = pearson(rankdata(xa, method="average"), rankdata(ya, method="average"), level)
    return CorrelationResult(res.r, res.n, res.p_two_tailed, res.ci_low, res.ci_high, "spearman", "fisher_z")


def as_matrix(profiles, scales: Sequence[str] = DOMAINS) -> np.ndarray:
    """Stack profiles (mappings or rows) into an (n, len(scales)) float array."""
    rows = list(profiles)
    if rows and isinstance(rows[0], Mapping):
        return np.array([[float(p[s]) for s in scales] for p in rows], dtype=float)
    return np.asarray(rows, dtype=float)


def mean_domain_r(truth, recovered) -> float:
    t = as_matrix(truth)
    r = as_matrix(recovered)
    return float(np.mean([_product_moment(*_pair(t[:, j], r[:, j])) for j in range(t.shape[1])]))


def bootstrap_mean_r(
    truth,
    recovered,
    n_resamples: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapResult:
    """Participant-resampling percentile interval for the mean domain correlation.

    Resamples in which any column is constant are discarded and re-drawn from
    the same generator; the number of re-draws is reported.
    """
    t = np.ascontiguousarray(as_matrix(truth))
    r = np.ascontiguousarray(as_matrix(recovered))
    if t.shape != r.shape or t.ndim != 2:
        raise ShapeError(f"truth {t.shape} and recovered {r.shape} must be equal 2-D shapes")
    n = t.shape[0]
    if n < 10:
        raise ShapeError(f"bootstrap needs at least 10 participants, got {n}")
    point = mean_domain_r(t, r)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n), dtype=np.int64)
    values = kernels.bootstrap_mean_r(t, r, idx)
    redraws = 0
    bad = np.flatnonzero(np.isnan(values))
    while bad.size:
        redraws += bad.size
        if redraws > 100 * n_resamples:
            raise DegenerateInputError("bootstrap resamples are persistently degenerate")
        fresh = rng.integers(0, n, size=(bad.size, n), dtype=np.int64)
        values[bad] = kernels.bootstrap_mean_r(t, r, np.ascontiguousarray(fresh))
        bad = bad[np.isnan(values[bad])]
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return BootstrapResult(point, float(lo), float(hi), redraws, n_resamples)


def icc_2_1(ratings) -> ReliabilityResult:
    """Two-way random-effects, absolute-agreement, single-measure ICC."""
    x = np.asarray(ratings, dtype=float)
    if x.ndim != 2:
        raise ShapeError("ratings must be a subjects x raters matrix")
    n, k = x.shape
    if n < 2 or k < 2:
        raise ShapeError(f"need at least 2 subjects and 2 raters, got {n}x{k}")
    if np.isnan(x).any():
        missing = [tuple(ix) for ix in np.argwhere(np.isnan(x))]
        raise IncompletenessError(f"ratings matrix has {len(missing)} missing cells", missing)
    grand = x.mean()
    ss_total = float(((x - grand) ** 2).sum())
    if ss_total == 0:
        raise DegenerateInputError("ratings have zero total variance")
    ss_rows = k * float(((x.mean(axis=1) - grand) ** 2).sum())
    ss_cols = n * float(((x.mean(axis=0) - grand) ** 2).sum())
    ss_err = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    icc = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    return ReliabilityResult(min(icc, 1.0), n, k, msr, msc, mse)


def bonferroni(alpha: float, m: int) -> float:
    return SignificanceConfig(alpha, m).threshold


def binomial_test(successes: int, trials: int, p0: float, method: str = "minlike") -> float:
    """Exact two-tailed binomial p-value.

    ``minlike`` sums the probabilities of every outcome no more likely than the
    observed one. ``double`` doubles the smaller one-sided tail (capped at 1).
    """
    if not 0 < p0 < 1:
        raise RangeError(f"p0 must lie in (0, 1), got {p0}")
    if trials < 0 or not 0 <= successes <= trials:
        raise RangeError(f"need 0 <= successes <= trials, got {successes}/{trials}")
    k = np.arange(trials + 1)
    logpmf = (
        special.gammaln(trials + 1)
        - special.gammaln(k + 1)
        - special.gammaln(trials - k + 1)
        + k * math.log(p0)
        + (trials - k) * math.log1p(-p0)
    )
    pmf = np.exp(logpmf)
    if method == "minlike":
        observed = pmf[successes]
        return float(min(1.0, pmf[pmf <= observed * (1 + 1e-7)].sum()))
    if method == "double":
        lower = pmf[: successes + 1].sum()
        upper = pmf[successes:].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    raise ValueError(f"unknown method {method!r}")


def binomial_central_interval(trials: int, p0: float, coverage: float = 0.99) -> tuple[int, int]:
    """Smallest (lo, hi) success counts with each tail mass at most (1 - coverage)/2."""
    tail = (1.0 - coverage) / 2.0
    return int(binom.ppf(tail, trials, p0)), int(binom.isf(tail, trials, p0))


def dispersion(values, with_cv: bool = True) -> tuple[float, float, float]:
    """Mean, sample SD (n - 1 denominator), and coefficient of variation."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ShapeError(f"dispersion needs at least 2 values, got {v.size}")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    if not with_cv:
        return mean, sd, float("nan")
    if mean == 0:
        raise DegenerateInputError("coefficient of variation undefined for zero mean")
    return mean, sd, sd / mean

"""Rank-based comparison of per-image metric values across methods."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DimensionError, ParameterError, UsageError

JB_CRITICAL_95 = 5.991464547107979  # chi-square(2) 0.95 quantile, = -2 ln 0.05
_GAMMA_EPS = 1e-15
_GAMMA_ITERS = 500


@dataclass
class SampleGroup:
    method: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size < 1:
            raise DimensionError(f"group {self.method!r} is empty")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError(f"group {self.method!r} holds non-finite values")


@dataclass
class PairwiseResult:
    method_a: str
    method_b: str
    z: float
    p_raw: float
    p_adjusted: float = float("nan")


@dataclass
class TestResult:
    statistic: float
    df: int
    p_value: float
    tied: bool = False
    pairwise: list[PairwiseResult] = field(default_factory=list)


# ------------------------------------------------------------------ special fns

def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x).

    Series for P when x < a + 1, Lentz continued fraction for Q otherwise.
    """
    if a <= 0:
        raise ParameterError(f"gamma shape must be positive, got {a}")
    if x < 0:
        raise ParameterError(f"gamma argument must be >= 0, got {x}")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(_GAMMA_ITERS):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _GAMMA_EPS:
                break
        return max(0.0, 1.0 - total * math.exp(log_prefix))
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITERS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        step = d * c
        h *= step
        if abs(step - 1.0) < _GAMMA_EPS:
            break
    return min(1.0, math.exp(log_prefix) * h)


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if df < 1:
        raise ParameterError(f"chi-square df must be >= 1, got {df}")
    if x <= 0:
        return 1.0
    return regularized_gamma_q(df / 2.0, x / 2.0)


def normal_two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


# ----------------------------------------------------------------------- ranks

def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def tie_sizes(values: np.ndarray) -> np.ndarray:
    _, counts = np.unique(np.asarray(values), return_counts=True)
    return counts


def _as_groups(groups) -> list[SampleGroup]:
    out = [g if isinstance(g, SampleGroup) else SampleGroup(str(i), g) for i, g in enumerate(groups)]
    if len(out) < 2:
        raise UsageError(f"need at least two groups, got {len(out)}")
    return out


def _pooled(groups):
    pooled = np.concatenate([g.values for g in groups])
    ranks = midranks(pooled)
    bounds = np.cumsum([0] + [g.values.size for g in groups])
    return pooled, [ranks[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


# ------------------------------------------------------------------------ tests

def kruskal_wallis(groups) -> TestResult:
    """Omnibus H with midranks and tie correction; p from the chi-square tail.

    If every value is identical the statistic is undefined; the result is
    H = 0, p = 1 with ``tied`` set.
    """
    groups = _as_groups(groups)
    pooled, ranks = _pooled(groups)
    n = pooled.size
    if n < 3:
        raise DimensionError(f"kruskal_wallis needs N >= 3 observations, got {n}")
    df = len(groups) - 1
    t = tie_sizes(pooled)
    correction = 1.0 - float(np.sum(t ** 3 - t)) / (n ** 3 - n)
    if correction <= 0.0:
        return TestResult(0.0, df, 1.0, tied=True)
    h = 12.0 / (n * (n + 1)) * sum(r.sum() ** 2 / r.size for r in ranks) - 3.0 * (n + 1)
    h = max(h / correction, 0.0)
    return TestResult(h, df, chi2_sf(h, df))


def dunn_posthoc(groups) -> list[PairwiseResult]:
    """Pairwise z on mean ranks with the tie-adjusted variance; raw two-sided p."""
    groups = _as_groups(groups)
    pooled, ranks = _pooled(groups)
    n = pooled.size
    t = tie_sizes(pooled)
    tie_term = float(np.sum(t ** 3 - t)) / (12.0 * (n - 1)) if n > 1 else 0.0
    variance = n * (n + 1) / 12.0 - tie_term
    out = []
    for i, j in combinations(range(len(groups)), 2):
        diff = ranks[i].mean() - ranks[j].mean()
        se2 = variance * (1.0 / ranks[i].size + 1.0 / ranks[j].size)
        z = diff / math.sqrt(se2) if se2 > 0 else 0.0
        out.append(PairwiseResult(groups[i].method, groups[j].method, z, normal_two_sided_p(z)))
    return out


def holm_adjust(p_raw) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_raw, dtype=np.float64).ravel()
    if np.any(~((p >= 0) & (p <= 1))):
        raise ParameterError("holm_adjust: p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    stepped = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adjusted = np.empty(m)
    adjusted[order] = np.maximum.accumulate(stepped)
    return adjusted


def compare(groups) -> TestResult:
    """Omnibus test plus Holm-adjusted Dunn comparisons."""
    groups = _as_groups(groups)
    result = kruskal_wallis(groups)
    pairs = dunn_posthoc(groups)
    for pr, adj in zip(pairs, holm_adjust([pr.p_raw for pr in pairs])):
        pr.p_adjusted = float(adj)
    result.pairwise = pairs
    return result


def jarque_bera(values) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0.0:
        return math.inf
    skew = np.mean(d ** 3) / m2 ** 1.5
    kurt = np.mean(d ** 4) / m2 ** 2
    return float(x.size / 6.0 * (skew ** 2 + 0.25 * (kurt - 3.0) ** 2))


def shapiro_flag(values) -> bool:
    """Normality screen: True when the Jarque-Bera statistic exceeds the
    chi-square(2) 95% point. A constant sample is always rejected."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 8:
        raise DimensionError(f"shapiro_flag needs at least 8 values, got {x.size}")
    return jarque_bera(x) > JB_CRITICAL_95

"""Exact and asymptotic frequentist tools for two binomial arms."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

# Relative slack when deciding whether a table is "as extreme" as the observed one.
FISHER_TIE_RTOL = 1e-7


@dataclass(frozen=True)
class TwoByTwo:
    r1: int
    n1: int
    r2: int
    n2: int

    def __post_init__(self):
        for r, n in ((self.r1, self.n1), (self.r2, self.n2)):
            if n < 1 or r < 0 or r > n:
                raise ValueError(f"invalid arm {r}/{n}")

    def swapped(self) -> "TwoByTwo":
        return TwoByTwo(self.r2, self.n2, self.r1, self.n1)


def _log_choose(n, k):
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def hypergeom_pmf(k, N, K, n):
    """P(X = k) for X ~ Hypergeometric(population N, K successes, n draws).

    Out-of-support ``k`` gives 0.
    """
    if not (0 <= K <= N and 0 <= n <= N):
        raise ValueError(f"invalid hypergeometric parameters N={N}, K={K}, n={n}")
    if k < max(0, n - (N - K)) or k > min(K, n):
        return 0.0
    logp = _log_choose(K, k) + _log_choose(N - K, n - k) - _log_choose(N, n)
    return float(np.exp(logp))


@lru_cache(maxsize=65536)
def _fisher_cached(r1, n1, r2, n2):
    N = n1 + n2
    K = r1 + r2
    lo, hi = max(0, n1 - (N - K)), min(K, n1)
    ks = np.arange(lo, hi + 1)
    logp = _log_choose(K, ks) + _log_choose(N - K, n1 - ks) - _log_choose(N, n1)
    logp_obs = logp[r1 - lo]
    extreme = logp <= logp_obs + np.log1p(FISHER_TIE_RTOL)
    # Normalize against the full support so rounding in the log-space
    # coefficients cannot push the p-value above 1.
    w = np.exp(logp - logp.max())
    return float(min(w[extreme].sum() / w.sum(), 1.0))


def fisher_exact_two_sided(table: TwoByTwo) -> float:
    """Two-sided Fisher exact p-value, minimum-likelihood tail definition.

    Sums the conditional probabilities of every table with the observed
    margins that is no more likely than the observed one.
    """
    return _fisher_cached(table.r1, table.n1, table.r2, table.n2)


def clopper_pearson(r, n, level=0.95):
    """Exact (beta-quantile) two-sided confidence interval for a binomial rate."""
    if n < 1 or r < 0 or r > n:
        raise ValueError(f"invalid binomial count {r}/{n}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    a = (1.0 - level) / 2.0
    lo = 0.0 if r == 0 else float(special.betaincinv(r, n - r + 1, a))
    hi = 1.0 if r == n else float(special.betaincinv(r + 1, n - r, 1.0 - a))
    return lo, hi


def normal_cdf(x):
    return special.ndtr(x)


def normal_quantile(q):
    return special.ndtri(q)


def analytical_power_two_prop(p1, p2, n1, n2, alpha=0.05):
    """Two-sided power of the two-proportion z-test.

    Normal approximation with the pooled standard error under the null and
    the unpooled one under the alternative.
    """
    for p in (p1, p2):
        if not 0 < p < 1:
            raise ValueError(f"rates must lie in (0, 1), got {p}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = normal_quantile(1.0 - alpha / 2.0)
    pbar = (n1 * p1 + n2 * p2) / (n1 + n2)
    se0 = np.sqrt(pbar * (1.0 - pbar) * (1.0 / n1 + 1.0 / n2))
    se1 = np.sqrt(p1 * (1.0 - p1) / n1 + p2 * (1.0 - p2) / n2)
    d = abs(p2 - p1)
    return float(normal_cdf((d - z * se0) / se1) + normal_cdf((-d - z * se0) / se1))

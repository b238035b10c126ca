import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special

from bdbscm import TwoByTwo, analytical_power_two_prop, clopper_pearson, fisher_exact_two_sided, hypergeom_pmf
from bdbscm.exact import normal_cdf, normal_quantile
from oracles import fisher_sweep

# mpmath at 40 digits, evaluated at the binary doubles written here.
NORMAL_CDF_REFERENCE = [
    (-6.0, 9.865876450376981407008641e-10),
    (-3.5, 0.0002326290790355250363499259),
    (-1.959963984540054, 0.02500000000000001087616802),
    (-0.5, 0.3085375387259868963622954),
    (0.0, 0.5),
    (0.3, 0.6179114221889526330722736),
    (1.0, 0.8413447460685429485852325),
    (2.5, 0.9937903346742238648330219),
    (5.0, 0.9999997133484281208060883),
]
BETAINC_REFERENCE = [
    (2, 8, 0.2, 0.5637923840000000335276127),
    (0.5, 0.5, 0.3, 0.3690101195655453750437202),
    (7, 79, 0.05, 0.1330098124568396082199446),
    (33.5, 90.5, 0.3, 0.7768973712632360944190745),
    (1, 1, 0.42, 0.4199999999999999844568777),
    (120, 415, 0.22, 0.4128195412049534566727883),
]


@pytest.mark.parametrize("x, expected", NORMAL_CDF_REFERENCE)
def test_normal_cdf_reference(x, expected):
    assert abs(normal_cdf(x) - expected) <= 1e-10 * max(expected, 1e-300) or abs(normal_cdf(x) - expected) < 1e-16


@pytest.mark.parametrize("a, b, x, expected", BETAINC_REFERENCE)
def test_incomplete_beta_reference(a, b, x, expected):
    assert special.betainc(a, b, x) == pytest.approx(expected, rel=1e-10)


def test_normal_quantile_reference():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540053855604431, rel=1e-12)
    assert normal_quantile(0.5) == 0.0


# --------------------------------------------------------------------------
# hypergeometric kernel


def test_hypergeom_small_case():
    assert hypergeom_pmf(1, 4, 2, 2) == pytest.approx(4 / 6, rel=1e-12)


def test_hypergeom_normalizes():
    total = sum(hypergeom_pmf(k, 20, 7, 10) for k in range(0, 11))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_hypergeom_empty_margin_and_out_of_support():
    assert hypergeom_pmf(0, 15, 0, 6) == pytest.approx(1.0)
    assert hypergeom_pmf(3, 20, 2, 10) == 0.0


# --------------------------------------------------------------------------
# Fisher's exact test


def test_fisher_identical_arms():
    assert fisher_exact_two_sided(TwoByTwo(5, 20, 5, 20)) == pytest.approx(1.0)


def test_fisher_two_table_support():
    assert fisher_exact_two_sided(TwoByTwo(1, 2, 0, 2)) == pytest.approx(1.0)


def test_fisher_extreme_table():
    assert fisher_exact_two_sided(TwoByTwo(10, 10, 0, 10)) == pytest.approx(2 / math.comb(20, 10), rel=1e-10)
    assert fisher_exact_two_sided(TwoByTwo(10, 10, 0, 10)) == pytest.approx(1.08e-5, rel=3e-3)


def test_fisher_matches_enumeration_oracle_all_tables_up_to_40():
    worst, checked = fisher_sweep(40)
    assert checked > 20000
    assert worst <= 1e-9, worst


tables = st.tuples(st.integers(1, 60), st.integers(1, 60)).flatmap(
    lambda n: st.tuples(st.integers(0, n[0]), st.just(n[0]), st.integers(0, n[1]), st.just(n[1]))
)


@given(tables)
def test_fisher_row_swap_invariant_and_in_unit_interval(t):
    table = TwoByTwo(*t)
    p = fisher_exact_two_sided(table)
    assert 0 < p <= 1
    assert p == pytest.approx(fisher_exact_two_sided(table.swapped()), rel=1e-12)


# --------------------------------------------------------------------------
# Clopper-Pearson


def test_clopper_pearson_zero_responders():
    lo, hi = clopper_pearson(0, 10, 0.95)
    assert lo == 0.0
    assert hi == pytest.approx(1 - 0.025 ** (1 / 10), rel=1e-10)
    assert hi == pytest.approx(0.3085, abs=1e-4)


def test_clopper_pearson_all_responders():
    lo, hi = clopper_pearson(10, 10, 0.95)
    assert hi == 1.0
    assert lo == pytest.approx(0.025 ** (1 / 10), rel=1e-10)
    assert lo == pytest.approx(0.6915, abs=1e-4)


@pytest.mark.parametrize("n", [1, 5, 89, 500])
@pytest.mark.parametrize("level", [0.8, 0.95, 0.99])
def test_clopper_pearson_lower_zero_when_no_responders(n, level):
    assert clopper_pearson(0, n, level)[0] == 0.0


def test_clopper_pearson_tail_identity():
    # lower bound solves P(X >= r | lo) = alpha/2
    lo, hi = clopper_pearson(7, 85)
    from scipy import stats

    assert stats.binom.sf(6, 85, lo) == pytest.approx(0.025, rel=1e-8)
    assert stats.binom.cdf(7, 85, hi) == pytest.approx(0.025, rel=1e-8)


def test_clopper_pearson_coverage():
    rng = np.random.default_rng(20240614)
    n, p = 20, 0.2
    x = rng.binomial(n, p, size=100_000)
    bounds = np.array([clopper_pearson(r, n) for r in range(n + 1)])
    covered = (bounds[x, 0] <= p) & (p <= bounds[x, 1])
    assert covered.mean() >= 0.95


# --------------------------------------------------------------------------
# analytical power


@pytest.mark.parametrize("p, n1, n2", [(0.2224, 89, 30), (0.5, 30, 30), (0.1, 200, 40)])
def test_power_null_case_equals_alpha(p, n1, n2):
    assert analytical_power_two_prop(p, p, n1, n2, 0.05) == pytest.approx(0.05, abs=0.005)


def test_power_monotone_in_difference_and_size():
    deltas = np.linspace(0.0, 0.5, 26)
    powers = [analytical_power_two_prop(0.2, 0.2 + d, 89, 30) for d in deltas]
    assert np.all(np.diff(powers) > 0)
    sizes = [analytical_power_two_prop(0.2, 0.4, 89, n) for n in range(5, 200, 5)]
    assert np.all(np.diff(sizes) > 0)


def test_power_matches_closed_form():
    from scipy import stats

    p1, p2, n1, n2 = 0.2, 0.35, 60, 45
    z = stats.norm.ppf(0.975)
    pbar = (n1 * p1 + n2 * p2) / (n1 + n2)
    se0 = math.sqrt(pbar * (1 - pbar) * (1 / n1 + 1 / n2))
    se1 = math.sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)
    expected = stats.norm.cdf((0.15 - z * se0) / se1) + stats.norm.cdf((-0.15 - z * se0) / se1)
    assert analytical_power_two_prop(p1, p2, n1, n2) == pytest.approx(expected, rel=1e-12)

import json
import math

import numpy as np
import pytest
from scipy import stats

from bdbscm import (
    BetaMixture,
    DesignConfig,
    OCResult,
    builtin_dataset,
    calibrate_effect,
    compare_designs,
    fit_rate_distribution,
    run_bdb_oc,
    run_scm_oc,
    total_information,
    tune_threshold,
)
from bdbscm.oc import (
    POOLED_HISTORICAL_RATE,
    VAGUE,
    bdb_posterior_prob,
    bdb_replicate_probs,
    exact_bdb_oc,
    mc_se,
    with_threshold,
)

RATE = fit_rate_distribution(builtin_dataset())


def _z_power(p1, p2, n1, n2, alpha):
    # independent two-proportion z-test power oracle
    z = stats.norm.ppf(1 - alpha / 2)
    pbar = (n1 * p1 + n2 * p2) / (n1 + n2)
    se0 = math.sqrt(pbar * (1 - pbar) * (1 / n1 + 1 / n2))
    se1 = math.sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)
    d = abs(p2 - p1)
    return stats.norm.cdf((d - z * se0) / se1) + stats.norm.cdf((-d - z * se0) / se1)


# --------------------------------------------------------------------------
# config


def test_config_invariants():
    with pytest.raises(ValueError):
        DesignConfig(p_control_true=0.9, delta=0.2)
    with pytest.raises(ValueError):
        DesignConfig(replicates=0)
    with pytest.raises(ValueError):
        DesignConfig(decision_threshold=1.0)
    with pytest.raises(ValueError):
        DesignConfig(treatment_null="random")


def test_config_round_trip_and_digest():
    cfg = DesignConfig(delta=0.1, prior=BetaMixture((0.5, 0.5), (1, 3), (1, 9)), rate_model=RATE, seed=4)
    back = DesignConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert DesignConfig(seed=5).digest() != DesignConfig(seed=6).digest()
    with pytest.raises(ValueError, match="unknown"):
        DesignConfig.from_dict({"n_treats": 30})


def test_missing_prior_or_rate_model():
    with pytest.raises(ValueError):
        run_bdb_oc(DesignConfig())
    with pytest.raises(ValueError):
        run_scm_oc(DesignConfig())


# --------------------------------------------------------------------------
# borrowing design


def test_bdb_zero_delta_power_equals_type1(robust_map):
    res = run_bdb_oc(DesignConfig(prior=robust_map, replicates=2000, seed=1))
    assert res.power == res.type1
    assert res.mc_se_power == res.mc_se_type1 == mc_se(res.type1, 2000)


def test_bdb_large_separation(robust_map):
    cfg = DesignConfig(prior=robust_map, p_control_true=0.05, delta=0.90, replicates=2000, seed=2)
    assert run_bdb_oc(cfg).power > 0.99


def test_bdb_mc_inner_agrees_with_quadrature(robust_map):
    quad = DesignConfig(prior=robust_map)
    mc = DesignConfig(prior=robust_map, inner="mc", mc_draws=100_000)
    for r_c, r_t in [(7, 12), (3, 10), (10, 10)]:
        assert bdb_posterior_prob(mc, r_c, r_t) == pytest.approx(bdb_posterior_prob(quad, r_c, r_t), abs=0.01)


def test_bdb_simulation_matches_enumeration(robust_map):
    cfg = DesignConfig(prior=robust_map, delta=0.2, replicates=10_000, seed=3)
    res = run_bdb_oc(cfg)
    exact = exact_bdb_oc(cfg)
    assert abs(res.power - exact) < 4 * mc_se(exact, cfg.replicates)
    exact0 = exact_bdb_oc(cfg, delta=0.0)
    assert abs(res.type1 - exact0) < 4 * mc_se(exact0, cfg.replicates) + 1e-12


def test_bdb_power_monotone_in_delta(robust_map):
    powers = []
    for d in (0.0, 0.05, 0.1, 0.15, 0.2):
        powers.append(run_bdb_oc(DesignConfig(prior=robust_map, delta=d, replicates=10_000, seed=5)))
    for lo, hi in zip(powers[:-1], powers[1:]):
        assert hi.power >= lo.power - 2 * max(hi.mc_se_power, lo.mc_se_power)


def test_map_prior_beats_vague_under_consistent_truth(map_fit, robust_map):
    p_c = robust_map.mean()
    kw = dict(p_control_true=p_c, delta=0.2, replicates=10_000, seed=7)
    vague = run_bdb_oc(DesignConfig(prior=VAGUE, **kw))
    informed = run_bdb_oc(DesignConfig(prior=map_fit.mixture_, **kw))
    robust = run_bdb_oc(DesignConfig(prior=robust_map, **kw))
    assert vague.power < informed.power
    assert vague.power < robust.power


def test_prior_conflict_ordering(map_fit, robust_map):
    def type1(prior, p_c):
        cfg = DesignConfig(prior=prior, p_control_true=p_c, replicates=10_000, seed=8)
        return run_bdb_oc(cfg).type1

    consistent = map_fit.mixture_.mean()
    robust_excess = type1(robust_map, 0.6) - type1(robust_map, consistent)
    plain_excess = type1(map_fit.mixture_, 0.6) - type1(map_fit.mixture_, consistent)
    assert robust_excess < plain_excess


def test_tune_threshold_hits_grid_optimum(robust_map):
    cfg = DesignConfig(prior=robust_map, replicates=4000, seed=9)
    eta, t1 = tune_threshold(cfg, target_type1=0.026)
    assert 0.95 <= eta <= 0.99
    p = bdb_replicate_probs(cfg, 0.0)
    assert t1 == pytest.approx(np.mean(p > eta))
    grid = np.round(np.arange(0.95, 0.99 + 5e-6, 1e-5), 8)
    best = min(abs(np.mean(p > g) - 0.026) for g in grid)
    assert abs(t1 - 0.026) == pytest.approx(best)
    assert run_bdb_oc(with_threshold(cfg, eta)).type1 == pytest.approx(t1)


# --------------------------------------------------------------------------
# synthetic control design


def test_scm_zero_delta_power_equals_type1():
    res = run_scm_oc(DesignConfig(rate_model=RATE, replicates=2000, seed=1))
    assert res.power == res.type1


def test_scm_alpha_one_always_rejects():
    res = run_scm_oc(DesignConfig(rate_model=RATE, alpha=1.0, delta=0.1, replicates=500, seed=2))
    assert res.power == 1.0 and res.type1 == 1.0


@pytest.mark.parametrize(
    "kw",
    [
        dict(rate_model=RATE),
        dict(rate_model=RATE, synth_size=64),
        dict(rate_model=RATE, n_treat=60),
        dict(rate_model=fit_rate_distribution(builtin_dataset(), "unweighted")),
        dict(rate_model=fit_rate_distribution(builtin_dataset()).__class__("pooled", POOLED_HISTORICAL_RATE)),
        dict(rate_model=RATE, alpha=0.1),
    ],
)
def test_scm_type1_conservative(kw):
    res = run_scm_oc(DesignConfig(replicates=10_000, seed=11, **kw))
    assert res.type1 <= res.alpha + 3 * res.mc_se_type1


def test_scm_power_monotone_in_delta():
    powers = [run_scm_oc(DesignConfig(rate_model=RATE, delta=d, replicates=10_000, seed=12)) for d in (0.0, 0.05, 0.1, 0.15, 0.2)]
    for lo, hi in zip(powers[:-1], powers[1:]):
        assert hi.power >= lo.power - 2 * max(hi.mc_se_power, lo.mc_se_power)


def test_fixed_treatment_null_mode_runs():
    res = run_scm_oc(DesignConfig(rate_model=RATE, treatment_null="fixed", replicates=1000, seed=3))
    assert res.extra["treatment_null"] == "fixed"
    assert 0 <= res.type1 <= 1


# --------------------------------------------------------------------------
# determinism


def test_thread_count_independence(robust_map):
    bdb = DesignConfig(prior=robust_map, delta=0.2, replicates=3000, seed=21)
    scm = DesignConfig(rate_model=RATE, delta=0.2, replicates=3000, seed=21)
    assert run_bdb_oc(bdb, threads=1) == run_bdb_oc(bdb, threads=4)
    assert run_scm_oc(scm, threads=1) == run_scm_oc(scm, threads=3)
    assert run_scm_oc(scm, threads=1).to_json() == run_scm_oc(scm, threads=2).to_json()


def test_result_json(robust_map):
    res = run_bdb_oc(DesignConfig(prior=robust_map, replicates=500))
    d = json.loads(res.to_json())
    for key in ("power", "type1", "mc_se_power", "mc_se_type1", "replicates", "seed", "config_digest", "tool_version"):
        assert key in d
    assert d["mc_se_power"] == pytest.approx(math.sqrt(d["power"] * (1 - d["power"]) / d["replicates"]))


# --------------------------------------------------------------------------
# calibration and accounting


def test_calibrate_published_setting():
    d = calibrate_effect(0.641, POOLED_HISTORICAL_RATE, 89, 30)
    assert 0.20 < d < 0.25
    assert abs(_z_power(POOLED_HISTORICAL_RATE, POOLED_HISTORICAL_RATE + d, 89, 30, 0.05) - 0.641) < 1e-4


def test_calibrate_near_alpha_gives_small_delta():
    assert calibrate_effect(0.05 + 1e-3, 0.3, 50, 50) < 0.01


def test_calibrate_monotone():
    ds = [calibrate_effect(t, 0.3, 50, 50) for t in (0.2, 0.5, 0.8, 0.95)]
    assert ds == sorted(ds)


def test_calibrate_errors():
    with pytest.raises(ValueError):
        calibrate_effect(0.04, 0.3, 50, 50)
    with pytest.raises(ValueError):
        calibrate_effect(0.999999, 0.9, 3, 3)


@pytest.mark.parametrize("args,expected", [((30, 30, 7.4, 0.5), 63.7), ((0, 0, 0, 0.3), 0.0), ((30, 30, 7.4, 1.0), 67.4)])
def test_total_information(args, expected):
    assert total_information(*args) == pytest.approx(expected, abs=1e-12)


def test_total_information_rejects_negative():
    with pytest.raises(ValueError):
        total_information(30, -1, 7.4, 0.5)


def _result(design, power, type1, delta=0.2, digest="abc"):
    return OCResult(design, power, type1, mc_se(power, 100), mc_se(type1, 100), 100, 0, digest, delta, 0.05, 0.975)


def test_compare_identical():
    r = _result("bdb", 0.5, 0.03)
    rep = compare_designs(r, r)
    assert rep.power_diff == 0 and rep.type1_diff == 0
    assert rep.power_intervals_overlap and rep.type1_intervals_overlap


def test_compare_differences_and_digests():
    rep = compare_designs(_result("bdb", 0.580, 0.026, digest="b1"), _result("scm", 0.641, 0.027, digest="s1"))
    assert rep.power_diff == pytest.approx(0.061)
    assert rep.config_digests == {"bdb": "b1", "scm": "s1"}
    assert "tool_version" in rep.to_dict()


def test_compare_rejects_mismatched_delta():
    with pytest.raises(ValueError):
        compare_designs(_result("bdb", 0.5, 0.03, delta=0.2), _result("scm", 0.5, 0.03, delta=0.1))

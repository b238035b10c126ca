"""Monte Carlo operating characteristics of the borrowing and synthetic designs.

Every replicate draws from its own stream keyed by ``(seed, replicate)``, and
aggregation only counts successes, so results do not depend on the number of
worker threads. Power and type 1 error runs share replicate streams (common
random numbers); with ``delta == 0`` the two estimates coincide.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from bdbscm import __version__
from bdbscm._rng import STAGE_OC, stream
from bdbscm.exact import TwoByTwo, analytical_power_two_prop, fisher_exact_two_sided
from bdbscm.mixture import BetaMixture, prob_greater, prob_greater_quad, update
from bdbscm.synthetic import RATE_EPS, RateModel, generate_arm

POOLED_HISTORICAL_RATE = 119 / 535
VAGUE = BetaMixture.beta(1.0, 1.0)


@dataclass(frozen=True)
class DesignConfig:
    """All knobs of one simulated design.

    ``prior`` is the control-arm prior for the borrowing design;
    ``rate_model`` and ``synth_size`` describe the synthetic control arm.
    ``treatment_null`` chooses how the synthetic design's treatment rate is
    tied to the control truth: ``"shared"`` uses each replicate's drawn
    control rate plus ``delta``; ``"fixed"`` uses ``p_control_true + delta``.
    ``inner`` picks the posterior-probability evaluator for the borrowing
    design (``"quad"`` quadrature or ``"mc"`` Monte Carlo with
    ``mc_draws`` draws).
    """

    n_treat: int = 30
    n_control: int = 30
    p_control_true: float = POOLED_HISTORICAL_RATE
    delta: float = 0.0
    alpha: float = 0.05
    decision_threshold: float = 0.975
    replicates: int = 10_000
    seed: int = 0
    prior: BetaMixture | None = None
    rate_model: RateModel | None = None
    synth_size: int = 89
    treatment_null: str = "shared"
    inner: str = "quad"
    mc_draws: int = 4000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_treat < 1 or self.n_control < 1 or self.synth_size < 1:
            raise ValueError("arm sizes must be >= 1")
        if not 0 < self.p_control_true < 1:
            raise ValueError("p_control_true must lie in (0, 1)")
        if not 0 < self.p_control_true + self.delta < 1:
            raise ValueError("p_control_true + delta must lie in (0, 1)")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 < self.decision_threshold < 1:
            raise ValueError("decision_threshold must lie in (0, 1)")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.treatment_null not in ("shared", "fixed"):
            raise ValueError(f"unknown treatment_null {self.treatment_null!r}")
        if self.inner not in ("quad", "mc"):
            raise ValueError(f"unknown inner evaluator {self.inner!r}")

    @property
    def p_treat_true(self) -> float:
        return self.p_control_true + self.delta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"] = None if self.prior is None else [{"w": w, "a": a, "b": b} for w, a, b in self.prior.components]
        d["rate_model"] = None if self.rate_model is None else self.rate_model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DesignConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown design config keys: {sorted(unknown)}")
        if d.get("prior") is not None:
            d["prior"] = BetaMixture.from_json(d["prior"])
        if d.get("rate_model") is not None:
            d["rate_model"] = RateModel.from_dict(d["rate_model"])
        return cls(**d)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class OCResult:
    design: str
    power: float
    type1: float
    mc_se_power: float
    mc_se_type1: float
    replicates: int
    seed: int
    config_digest: str
    delta: float
    alpha: float
    decision_threshold: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tool_version"] = __version__
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def mc_se(p_hat, replicates):
    return float(np.sqrt(p_hat * (1 - p_hat) / replicates))


def _chunks(n, threads):
    threads = max(1, int(threads or 1))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _map_chunks(fn, n, threads):
    chunks = _chunks(n, threads)
    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: fn(*c), chunks))
    else:
        parts = [fn(*c) for c in chunks]
    return np.concatenate(parts, axis=0)


# --------------------------------------------------------------------------
# borrowing design


def _bdb_tables(config: DesignConfig, delta: float, threads=1):
    p_c = config.p_control_true
    p_t = p_c + delta

    def work(lo, hi):
        out = np.empty((hi - lo, 2), dtype=np.int64)
        for i in range(lo, hi):
            rng = stream(config.seed, STAGE_OC, i)
            out[i - lo, 0] = rng.binomial(config.n_control, p_c)
            out[i - lo, 1] = rng.binomial(config.n_treat, p_t)
        return out

    return _map_chunks(work, config.replicates, threads)


def bdb_posterior_prob(config: DesignConfig, r_c: int, r_t: int) -> float:
    """P(p_t > p_c | data) for the borrowing design's analysis model."""
    prior = config.prior if config.prior is not None else VAGUE
    post_c = update(prior, int(r_c), config.n_control)
    post_t = update(VAGUE, int(r_t), config.n_treat)
    if config.inner == "quad":
        return prob_greater_quad(post_t, post_c)
    # one MC seed per distinct table keeps the decision a function of the data
    seed = int(config.seed) * 1_000_003 + int(r_c) * 1009 + int(r_t)
    return prob_greater(post_t, post_c, n_draws=config.mc_draws, seed=seed)


def _table_probs(config, tables, threads=1):
    keys = sorted({(int(a), int(b)) for a, b in tables})
    if threads and threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(lambda k: bdb_posterior_prob(config, *k), keys))
    else:
        vals = [bdb_posterior_prob(config, *k) for k in keys]
    lookup = dict(zip(keys, vals))
    return np.array([lookup[(int(a), int(b))] for a, b in tables])


def bdb_replicate_probs(config: DesignConfig, delta=None, threads=1) -> np.ndarray:
    """Per-replicate posterior probabilities P(p_t > p_c | data)."""
    delta = config.delta if delta is None else delta
    tables = _bdb_tables(config, delta, threads)
    return _table_probs(config, tables, threads)


def run_bdb_oc(config: DesignConfig, threads=1) -> OCResult:
    """Power and type 1 error of the borrowing design.

    Control posterior: ``update(prior, r_c, n_control)``; treatment posterior:
    ``update(Beta(1, 1), r_t, n_treat)``; success iff
    P(p_t > p_c | data) > ``decision_threshold``.
    """
    if config.prior is None:
        raise ValueError("run_bdb_oc needs config.prior")
    eta = config.decision_threshold
    p_power = bdb_replicate_probs(config, config.delta, threads)
    p_null = p_power if config.delta == 0 else bdb_replicate_probs(config, 0.0, threads)
    power = float(np.mean(p_power > eta))
    type1 = float(np.mean(p_null > eta))
    R = config.replicates
    return OCResult(
        design="bdb",
        power=power,
        type1=type1,
        mc_se_power=mc_se(power, R),
        mc_se_type1=mc_se(type1, R),
        replicates=R,
        seed=int(config.seed),
        config_digest=config.digest(),
        delta=float(config.delta),
        alpha=float(config.alpha),
        decision_threshold=float(eta),
        extra={"n_treat": config.n_treat, "n_control": config.n_control, "inner": config.inner},
    )


def exact_bdb_oc(config: DesignConfig, delta=None) -> float:
    """Exact rejection probability by enumerating all (r_c, r_t) outcomes."""
    delta = config.delta if delta is None else delta
    rc = np.arange(config.n_control + 1)
    rt = np.arange(config.n_treat + 1)
    pc = stats.binom.pmf(rc, config.n_control, config.p_control_true)
    pt = stats.binom.pmf(rt, config.n_treat, config.p_control_true + delta)
    total = 0.0
    for i in rc:
        for j in rt:
            if bdb_posterior_prob(config, i, j) > config.decision_threshold:
                total += pc[i] * pt[j]
    return float(total)


def tune_threshold(config: DesignConfig, target_type1=0.026, lo=0.95, hi=0.99, step=1e-5, threads=1):
    """Pick the decision threshold in ``[lo, hi]`` whose simulated type 1 error
    is closest to ``target_type1`` (smallest threshold on ties).

    Returns ``(threshold, type1)``.
    """
    if config.prior is None:
        raise ValueError("tune_threshold needs config.prior")
    p_null = np.sort(bdb_replicate_probs(config, 0.0, threads))
    grid = np.round(np.arange(lo, hi + step / 2, step), 8)
    # mean(p > eta) via a sorted search
    type1 = 1.0 - np.searchsorted(p_null, grid, side="right") / p_null.size
    best = int(np.argmin(np.abs(type1 - target_type1)))
    return float(grid[best]), float(type1[best])


# --------------------------------------------------------------------------
# synthetic control design


def _scm_rejections(config: DesignConfig, delta: float, threads=1):
    model = config.rate_model

    def work(lo, hi):
        out = np.empty(hi - lo, dtype=bool)
        for i in range(lo, hi):
            rng = stream(config.seed, STAGE_OC, i)
            arm = generate_arm(model, config.synth_size, rng=rng)
            base = arm.drawn_rate if config.treatment_null == "shared" else config.p_control_true
            p_t = float(np.clip(base + delta, RATE_EPS, 1 - RATE_EPS))
            r_t = int(rng.binomial(config.n_treat, p_t))
            table = TwoByTwo(r_t, config.n_treat, arm.responders, config.synth_size)
            out[i - lo] = fisher_exact_two_sided(table) <= config.alpha
        return out

    return _map_chunks(work, config.replicates, threads)


def run_scm_oc(config: DesignConfig, threads=1) -> OCResult:
    """Power and type 1 error of the synthetic-control design.

    Success iff the two-sided Fisher p-value is <= ``alpha``.
    """
    if config.rate_model is None:
        raise ValueError("run_scm_oc needs config.rate_model")
    rej_power = _scm_rejections(config, config.delta, threads)
    rej_null = rej_power if config.delta == 0 else _scm_rejections(config, 0.0, threads)
    power = float(rej_power.mean())
    type1 = float(rej_null.mean())
    R = config.replicates
    return OCResult(
        design="scm",
        power=power,
        type1=type1,
        mc_se_power=mc_se(power, R),
        mc_se_type1=mc_se(type1, R),
        replicates=R,
        seed=int(config.seed),
        config_digest=config.digest(),
        delta=float(config.delta),
        alpha=float(config.alpha),
        decision_threshold=float(config.alpha),
        extra={
            "n_treat": config.n_treat,
            "synth_size": config.synth_size,
            "rate_model": config.rate_model.to_dict(),
            "treatment_null": config.treatment_null,
        },
    )


# --------------------------------------------------------------------------
# calibration and accounting


def calibrate_effect(target_power, p_control, n_control, n_treat, alpha=0.05, tol=1e-4, max_iter=60) -> float:
    """Rate difference giving ``target_power`` under the analytical z-test power.

    Bisection over ``delta`` in ``(0, 1 - p_control)``.
    """
    if not alpha < target_power < 1:
        raise ValueError("target_power must lie in (alpha, 1)")

    def power(d):
        return analytical_power_two_prop(p_control, p_control + d, n_control, n_treat, alpha)

    lo, hi = 0.0, 1.0 - p_control - 1e-9
    if power(hi) < target_power:
        raise ValueError(f"target power {target_power} unreachable with n = {n_control}/{n_treat}")
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        pw = power(mid)
        if abs(pw - target_power) < tol:
            break
        if pw < target_power:
            lo = mid
        else:
            hi = mid
    return mid


def total_information(n_treat, n_control, ess, weight) -> float:
    """Patients' worth of information: both arms plus the weighted prior ESS."""
    for v in (n_treat, n_control, ess, weight):
        if v < 0:
            raise ValueError("inputs must be non-negative")
    return n_treat + n_control + weight * ess


@dataclass(frozen=True)
class ComparisonReport:
    power_diff: float
    type1_diff: float
    se_power_diff: float
    se_type1_diff: float
    power_intervals_overlap: bool
    type1_intervals_overlap: bool
    bdb: dict
    scm: dict
    config_digests: dict

    def to_dict(self):
        d = asdict(self)
        d["tool_version"] = __version__
        return d


def _overlap(x, sx, y, sy, z=1.96):
    return not (x + z * sx < y - z * sy or y + z * sy < x - z * sx)


def compare_designs(bdb: OCResult, scm: OCResult) -> ComparisonReport:
    """Differences (SCM minus BDB) with Monte Carlo standard errors."""
    if not np.isclose(bdb.delta, scm.delta, rtol=0, atol=1e-12):
        raise ValueError(f"designs simulated at different effects: {bdb.delta} vs {scm.delta}")
    return ComparisonReport(
        power_diff=scm.power - bdb.power,
        type1_diff=scm.type1 - bdb.type1,
        se_power_diff=float(np.hypot(scm.mc_se_power, bdb.mc_se_power)),
        se_type1_diff=float(np.hypot(scm.mc_se_type1, bdb.mc_se_type1)),
        power_intervals_overlap=_overlap(bdb.power, bdb.mc_se_power, scm.power, scm.mc_se_power),
        type1_intervals_overlap=_overlap(bdb.type1, bdb.mc_se_type1, scm.type1, scm.mc_se_type1),
        bdb=bdb.to_dict(),
        scm=scm.to_dict(),
        config_digests={"bdb": bdb.config_digest, "scm": scm.config_digest},
    )


def with_threshold(config: DesignConfig, eta: float) -> DesignConfig:
    return replace(config, decision_threshold=eta)

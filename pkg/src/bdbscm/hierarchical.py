"""Random-effects binomial meta-analysis and its meta-analytic predictive prior.

Model, on the logit scale::

    r_j     ~ Binomial(n_j, expit(mu + theta_j))
    theta_j ~ Normal(0, tau^2)
    mu      ~ Normal(mu_prior_mean, mu_prior_sd^2)
    tau     ~ HalfNormal(tau_prior_scale)

The sampler is adaptive random-walk Metropolis-within-Gibbs over
``(mu, log tau, theta)``. Besides the single-site updates each sweep makes
two joint moves that keep the sampler healthy near the ``tau -> 0`` funnel:
a scale move rescaling ``theta`` with ``tau``, and a shift move trading
``mu`` against ``theta`` along the likelihood ridge.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from bdbscm._rng import STAGE_MCMC, STAGE_PREDICTIVE, stream
from bdbscm.data import as_counts

_LOG_2PI = np.log(2.0 * np.pi)
_TARGET_ACCEPT = 0.44


@dataclass(frozen=True)
class HierModelConfig:
    mu_prior_mean: float = 0.0
    mu_prior_sd: float = 2.0
    tau_prior_scale: float = 1.0
    link: str = "logit"

    def __post_init__(self):
        if self.mu_prior_sd <= 0 or self.tau_prior_scale <= 0:
            raise ValueError("prior scales must be strictly positive")
        if self.link != "logit":
            raise ValueError(f"unsupported link {self.link!r}")


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 2000
    n_kept: int = 2500
    step_mu: float = 0.3
    step_log_tau: float = 0.5
    step_theta: float = 0.3
    step_scale_move: float = 0.3
    step_shift_move: float = 0.3

    def __post_init__(self):
        if self.n_chains < 1 or self.n_kept < 1 or self.n_warmup < 0:
            raise ValueError("need n_chains >= 1, n_kept >= 1, n_warmup >= 0")


@dataclass
class PosteriorDraws:
    mu: np.ndarray
    tau: np.ndarray
    theta: np.ndarray  # (draws, studies)
    n_chains: int
    n_kept: int
    seed: int

    def __post_init__(self):
        n = len(self.mu)
        if len(self.tau) != n or self.theta.shape[0] != n:
            raise ValueError("draw arrays must have equal length")
        if np.any(self.tau < 0):
            raise ValueError("tau draws must be non-negative")

    def by_chain(self, values):
        return np.asarray(values).reshape(self.n_chains, self.n_kept, *np.shape(values)[1:])

    def to_csv(self) -> str:
        """Draws as CSV with columns chain, iter, mu, tau, theta_1..theta_J."""
        J = self.theta.shape[1]
        buf = io.StringIO()
        buf.write(",".join(["chain", "iter", "mu", "tau"] + [f"theta_{j + 1}" for j in range(J)]) + "\n")
        for i in range(len(self.mu)):
            chain, it = divmod(i, self.n_kept)
            vals = [repr(float(self.mu[i])), repr(float(self.tau[i]))]
            vals += [repr(float(t)) for t in self.theta[i]]
            buf.write(f"{chain},{it}," + ",".join(vals) + "\n")
        return buf.getvalue()


@dataclass
class MapDiagnostics:
    rhat: dict
    acceptance_rate: float
    effective_draws: dict
    converged: bool = True
    acceptance_by_block: dict = field(default_factory=dict)


def _log_prior(mu, tau, config: HierModelConfig):
    z = (mu - config.mu_prior_mean) / config.mu_prior_sd
    lp_mu = -0.5 * z * z - np.log(config.mu_prior_sd) - 0.5 * _LOG_2PI
    s = config.tau_prior_scale
    lp_tau = np.log(2.0) - np.log(s) - 0.5 * _LOG_2PI - 0.5 * (tau / s) ** 2
    return lp_mu + lp_tau


def _log_binom_coef(r, n):
    return special.gammaln(n + 1) - special.gammaln(r + 1) - special.gammaln(n - r + 1)


def _binom_loglik(r, n, eta, logc=None):
    # log C(n, r) + r*log(p) + (n-r)*log(1-p) with p = expit(eta), stable form
    if logc is None:
        logc = _log_binom_coef(r, n)
    return logc + r * eta - n * np.logaddexp(0.0, eta)


def _re_logpdf(theta, tau):
    return -0.5 * (theta / tau) ** 2 - np.log(tau) - 0.5 * _LOG_2PI


def log_posterior_density(mu, tau, theta, studies, config: HierModelConfig | None = None) -> float:
    """Unnormalized log posterior of ``(mu, tau, theta)``.

    Returns ``-inf`` outside the support; ``tau == 0`` is only in the support
    when there are no studies (the random-effect density degenerates).
    """
    config = config or HierModelConfig()
    r, n = as_counts(studies)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != r.shape:
        raise ValueError(f"theta must have one entry per study ({r.size}), got {theta.shape}")
    if tau < 0 or not np.isfinite(tau):
        return -np.inf
    lp = float(_log_prior(mu, tau, config))
    if r.size == 0:
        return lp
    if tau == 0:
        return -np.inf
    lp += float(np.sum(_re_logpdf(theta, tau)))
    lp += float(np.sum(_binom_loglik(r, n, mu + theta)))
    return lp


class _Chain:
    """State and kernels for one chain; owns its RNG."""

    def __init__(self, r, n, config, sampler, rng):
        self.r, self.n = r.astype(float), n.astype(float)
        self.logc = _log_binom_coef(self.r, self.n)
        self.config = config
        self.rng = rng
        J = r.size
        self.J = J
        emp = special.logit((r + 0.5) / (n + 1.0))
        self.mu = float(np.mean(emp) if J else config.mu_prior_mean) + rng.normal(0, 0.5)
        self.log_tau = np.log(0.5) + rng.normal(0, 0.5)
        self.theta = (emp - self.mu) * np.exp(rng.normal(0, 0.2)) if J else np.zeros(0)
        self.log_step = {
            "theta": np.full(J, np.log(sampler.step_theta)),
            "mu": np.log(sampler.step_mu),
            "log_tau": np.log(sampler.step_log_tau),
            "scale": np.log(sampler.step_scale_move),
            "shift": np.log(sampler.step_shift_move),
        }
        self.accepts = {k: 0.0 for k in self.log_step}
        self.tries = {k: 0.0 for k in self.log_step}

    # log density in sampling coordinates (mu, log_tau, theta), Jacobian included
    def _study_terms(self, mu, tau, theta):
        return _re_logpdf(theta, tau) + _binom_loglik(self.r, self.n, mu + theta, self.logc)

    def _full(self, mu, log_tau, theta):
        tau = np.exp(log_tau)
        return float(_log_prior(mu, tau, self.config) + log_tau + np.sum(self._study_terms(mu, tau, theta)))

    def _adapt(self, key, accepted, t):
        gamma = 1.0 / np.sqrt(t + 1.0)
        self.log_step[key] = self.log_step[key] + gamma * (np.asarray(accepted, dtype=float) - _TARGET_ACCEPT)

    def sweep(self, t, adapt):
        rng = self.rng
        tau = np.exp(self.log_tau)
        J = self.J
        if J:
            # theta_j are conditionally independent given (mu, tau)
            prop = self.theta + np.exp(self.log_step["theta"]) * rng.standard_normal(J)
            log_ratio = self._study_terms(self.mu, tau, prop) - self._study_terms(self.mu, tau, self.theta)
            acc = np.log(rng.random(J)) < log_ratio
            self.theta = np.where(acc, prop, self.theta)
            self.accepts["theta"] += acc.mean()
            self.tries["theta"] += 1
            if adapt:
                self._adapt("theta", acc, t)

        current = self._full(self.mu, self.log_tau, self.theta)
        moves = ("mu", "log_tau", "scale", "shift") if J else ("mu", "log_tau")
        for key in moves:
            step = np.exp(self.log_step[key]) * rng.standard_normal()
            mu, log_tau, theta = self.mu, self.log_tau, self.theta
            extra = 0.0
            if key == "mu":
                mu = mu + step
            elif key == "log_tau":
                log_tau = log_tau + step
            elif key == "scale":
                log_tau = log_tau + step
                theta = theta * np.exp(step)
                extra = J * step
            else:
                mu = mu + step
                theta = theta - step
            proposed = self._full(mu, log_tau, theta)
            ok = np.log(rng.random()) < proposed - current + extra
            if ok:
                self.mu, self.log_tau, self.theta, current = mu, log_tau, theta, proposed
            self.accepts[key] += ok
            self.tries[key] += 1
            if adapt:
                self._adapt(key, ok, t)

    def reset_counters(self):
        for k in self.accepts:
            self.accepts[k] = 0.0
            self.tries[k] = 0.0


def _run_chain(r, n, config, sampler, seed, chain_index):
    chain = _Chain(r, n, config, sampler, stream(seed, STAGE_MCMC, chain_index))
    for t in range(sampler.n_warmup):
        chain.sweep(t, adapt=True)
    chain.reset_counters()
    mu = np.empty(sampler.n_kept)
    tau = np.empty(sampler.n_kept)
    theta = np.empty((sampler.n_kept, r.size))
    for i in range(sampler.n_kept):
        chain.sweep(i, adapt=False)
        mu[i] = chain.mu
        tau[i] = np.exp(chain.log_tau)
        theta[i] = chain.theta
    rates = {k: chain.accepts[k] / chain.tries[k] for k in chain.tries if chain.tries[k]}
    return mu, tau, theta, rates


def split_rhat(x) -> float:
    """Split-R-hat for an ``(n_chains, n_draws)`` array."""
    x = np.asarray(x, dtype=float)
    half = x.shape[1] // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m, n = parts.shape
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def effective_draws(x) -> float:
    """Multi-chain effective sample size with Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    if n < 4:
        return float(m * n)
    centered = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    chain_var = x.var(axis=1, ddof=1)
    W = chain_var.mean()
    B = n * x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau_sum = 0.0
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        tau_sum += pair
    tau_int = max(2 * tau_sum - 1.0, 1e-12)
    return float(min(m * n / tau_int, m * n * np.log10(m * n)))


def fit_hierarchical(studies, config: HierModelConfig | None = None, sampler: SamplerConfig | None = None, seed=0, n_jobs=1):
    """Sample the hierarchical posterior; returns ``(PosteriorDraws, MapDiagnostics)``.

    Chains use streams keyed by ``(seed, chain_index)`` so the draws do not
    depend on ``n_jobs``. Non-convergence (R-hat > 1.1) is flagged, not raised.
    """
    config = config or HierModelConfig()
    sampler = sampler or SamplerConfig()
    r, n = as_counts(studies)
    if r.size < 1:
        raise ValueError("fit_hierarchical needs at least one study")
    args = [(r, n, config, sampler, seed, c) for c in range(sampler.n_chains)]
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            out = list(pool.map(lambda a: _run_chain(*a), args))
    else:
        out = [_run_chain(*a) for a in args]

    mu = np.concatenate([o[0] for o in out])
    tau = np.concatenate([o[1] for o in out])
    theta = np.concatenate([o[2] for o in out], axis=0)
    draws = PosteriorDraws(mu, tau, theta, sampler.n_chains, sampler.n_kept, int(seed))

    params = {"mu": draws.by_chain(mu), "tau": draws.by_chain(tau)}
    for j in range(r.size):
        params[f"theta_{j + 1}"] = draws.by_chain(theta[:, j])
    rhat = {k: split_rhat(v) for k, v in params.items()}
    ess = {k: effective_draws(v) for k, v in params.items()}
    blocks = {k: float(np.mean([o[3][k] for o in out])) for k in out[0][3]}
    diag = MapDiagnostics(
        rhat=rhat,
        acceptance_rate=float(np.mean(list(blocks.values()))),
        effective_draws=ess,
        converged=all(not (v > 1.1) for v in rhat.values()),
        acceptance_by_block=blocks,
    )
    return draws, diag


def predictive_draws(post: PosteriorDraws, m: int, seed=0) -> np.ndarray:
    """Draws of a new study's response rate, ``expit(mu + tau * z)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = stream(seed, STAGE_PREDICTIVE)
    idx = rng.integers(0, len(post.mu), size=m)
    z = rng.standard_normal(m)
    p = special.expit(post.mu[idx] + post.tau[idx] * z)
    tiny = np.finfo(float).tiny
    return np.clip(p, tiny, np.nextafter(1.0, 0.0))


class MAPPrior(BaseEstimator):
    """Meta-analytic predictive prior for a new control arm.

    ``fit`` takes the historical studies (``HistoricalStudy`` objects or an
    ``(n_studies, 2)`` array of responders and arm sizes), samples the
    hierarchical posterior, draws from the predictive distribution and
    approximates it by a beta mixture chosen by AIC.
    """

    def __init__(
        self,
        mu_prior_mean=0.0,
        mu_prior_sd=2.0,
        tau_prior_scale=1.0,
        n_chains=4,
        n_warmup=2000,
        n_kept=2500,
        n_predictive=10_000,
        max_components=3,
        random_state=0,
        n_jobs=1,
    ):
        self.mu_prior_mean = mu_prior_mean
        self.mu_prior_sd = mu_prior_sd
        self.tau_prior_scale = tau_prior_scale
        self.n_chains = n_chains
        self.n_warmup = n_warmup
        self.n_kept = n_kept
        self.n_predictive = n_predictive
        self.max_components = max_components
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _configs(self):
        model = HierModelConfig(self.mu_prior_mean, self.mu_prior_sd, self.tau_prior_scale)
        sampler = SamplerConfig(self.n_chains, self.n_warmup, self.n_kept)
        return model, sampler

    def fit(self, X, y=None):
        from bdbscm.mixture import select_mixture

        model, sampler = self._configs()
        seed = 0 if self.random_state is None else int(self.random_state)
        self.draws_, self.diagnostics_ = fit_hierarchical(X, model, sampler, seed=seed, n_jobs=self.n_jobs)
        self.predictive_ = predictive_draws(self.draws_, self.n_predictive, seed=seed)
        self.mixture_ = select_mixture(self.predictive_, K_max=self.max_components)
        return self

    def sample_predictive(self, m, random_state=0):
        check_is_fitted(self, "draws_")
        return predictive_draws(self.draws_, m, seed=random_state)

    def summary(self, level=0.95):
        """Mean, median and equal-tailed interval of the predictive draws and mixture."""
        check_is_fitted(self, "mixture_")
        a = (1 - level) / 2
        p = self.predictive_
        return {
            "draws": {
                "mean": float(p.mean()),
                "median": float(np.median(p)),
                "lo": float(np.quantile(p, a)),
                "hi": float(np.quantile(p, 1 - a)),
            },
            "mixture": {
                "mean": self.mixture_.mean(),
                "median": self.mixture_.quantile(0.5),
                "lo": self.mixture_.quantile(a),
                "hi": self.mixture_.quantile(1 - a),
            },
        }

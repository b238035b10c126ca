"""Beta mixtures as priors and posteriors for a response rate.

A :class:`BetaMixture` is an immutable value. Fitting to samples is done by
EM with an exact M-step (weighted beta maximum likelihood by Newton's method),
so the log-likelihood never decreases between iterations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from bdbscm._rng import STAGE_EM, STAGE_PROB, stream

PARAM_MIN = 1e-3
PARAM_MAX = 1e6


class DegenerateComponentWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BetaMixture:
    """Weighted mixture of Beta(a_k, b_k) densities."""

    weights: tuple
    a: tuple
    b: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if not (w.shape == a.shape == b.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("weights, a and b must be equal-length non-empty sequences")
        if np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)) or np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("beta parameters must be finite and strictly positive")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie in [0, 1] and sum to 1, got {w.tolist()}")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "a", tuple(float(x) for x in a))
        object.__setattr__(self, "b", tuple(float(x) for x in b))

    @classmethod
    def beta(cls, a, b) -> "BetaMixture":
        return cls((1.0,), (a,), (b,))

    @classmethod
    def from_components(cls, components) -> "BetaMixture":
        """Build from ``[(w, a, b), ...]``; weights are renormalized."""
        comps = np.asarray(components, dtype=float).reshape(-1, 3)
        w = comps[:, 0] / comps[:, 0].sum()
        return cls(tuple(w), tuple(comps[:, 1]), tuple(comps[:, 2]))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def components(self):
        return list(zip(self.weights, self.a, self.b))

    def arrays(self):
        return np.array(self.weights), np.array(self.a), np.array(self.b)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        w, a, b = self.arrays()
        xx = x[..., None]
        with np.errstate(divide="ignore"):
            terms = np.log(w) + special.xlogy(a - 1, xx) + special.xlog1py(b - 1, -xx) - special.betaln(a, b)
        return special.logsumexp(terms, axis=-1)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        w, a, b = self.arrays()
        return np.sum(w * special.betainc(a, b, np.clip(x, 0.0, 1.0)[..., None]), axis=-1)

    def mean(self) -> float:
        return mixture_mean(self)

    def var(self) -> float:
        w, a, b = self.arrays()
        m = a / (a + b)
        second = a * (a + 1) / ((a + b) * (a + b + 1))
        total_mean = np.sum(w * m)
        return float(np.sum(w * second) - total_mean**2)

    def quantile(self, q) -> float:
        return mixture_quantile(self, q)

    def sample(self, size, rng) -> np.ndarray:
        w, a, b = self.arrays()
        comp = rng.choice(len(w), size=size, p=w)
        return rng.beta(a[comp], b[comp])

    def to_json(self) -> str:
        return json.dumps([{"w": w, "a": a, "b": b} for w, a, b in self.components])

    @classmethod
    def from_json(cls, text) -> "BetaMixture":
        recs = json.loads(text) if isinstance(text, str) else text
        return cls.from_components([(r["w"], r["a"], r["b"]) for r in recs])


def mixture_mean(mix: BetaMixture) -> float:
    w, a, b = mix.arrays()
    return float(np.sum(w * a / (a + b)))


def mixture_quantile(mix: BetaMixture, q: float, tol: float = 1e-8) -> float:
    """Quantile of the mixture by bisection on its CDF."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mix.cdf(mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ess_moment(mix: BetaMixture) -> float:
    """Moment-matching effective sample size, ``m (1 - m) / v - 1``.

    Equals ``a + b`` for a single Beta(a, b).
    """
    if mix.n_components == 1:
        return mix.a[0] + mix.b[0]
    m = mix.mean()
    return float(m * (1 - m) / mix.var() - 1)


def robustify(mix: BetaMixture, vague_weight=0.5, a0=1.0, b0=1.0) -> BetaMixture:
    """Prepend a vague Beta(a0, b0) component carrying ``vague_weight``."""
    if not 0 < vague_weight < 1:
        raise ValueError("vague_weight must lie strictly between 0 and 1")
    w, a, b = mix.arrays()
    return BetaMixture(
        (vague_weight, *((1 - vague_weight) * w)),
        (a0, *a),
        (b0, *b),
    )


def update(mix: BetaMixture, r: int, n: int) -> BetaMixture:
    """Conjugate posterior after observing ``r`` responders out of ``n``.

    Each component is updated in closed form; weights are reweighted by each
    component's beta-binomial marginal likelihood, which is how a robust
    mixture shifts mass to its vague part under prior-data conflict.
    """
    if n < 0 or r < 0 or r > n:
        raise ValueError(f"invalid binomial observation {r}/{n}")
    if n == 0:
        return mix
    w, a, b = mix.arrays()
    a1, b1 = a + r, b + (n - r)
    with np.errstate(divide="ignore"):
        logw = np.log(w) + special.betaln(a1, b1) - special.betaln(a, b)
    logw -= special.logsumexp(logw)
    return BetaMixture(tuple(np.exp(logw)), tuple(a1), tuple(b1))


# --------------------------------------------------------------------------
# P(p_t > p_c)

def _composite_gl(n_per_panel=24):
    # panels packed geometrically toward both ends of [0, 1], where the
    # quantile-space integrand can switch sharply
    edges = np.r_[0.0, 10.0 ** np.arange(-12, 0), 0.5, 1 - 10.0 ** np.arange(-1, -13, -1), 1.0]
    g, wg = np.polynomial.legendre.leggauss(n_per_panel)
    lo, hi = edges[:-1, None], edges[1:, None]
    u = lo + (hi - lo) * (g + 1) / 2
    w = (hi - lo) / 2 * wg
    return u.ravel(), w.ravel()


_GL_U, _GL_W = _composite_gl()


def _inverse_cdf(mix: BetaMixture, u_comp, u_beta):
    w, a, b = mix.arrays()
    comp = np.searchsorted(np.cumsum(w)[:-1], u_comp, side="right")
    return special.betaincinv(a[comp], b[comp], u_beta)


def prob_greater(mix_t: BetaMixture, mix_c: BetaMixture, n_draws=100_000, seed=0, antithetic=True):
    """Monte Carlo estimate of P(p_t > p_c) for independent beta-mixture rates.

    Draws come from inverse-CDF transforms of uniforms; with ``antithetic``
    each uniform vector ``u`` is paired with ``1 - u``.
    """
    rng = stream(seed, STAGE_PROB)
    half = n_draws // 2 if antithetic else n_draws
    u = rng.random((4, half))
    if antithetic:
        u = np.concatenate([u, 1.0 - u], axis=1)
    pt = _inverse_cdf(mix_t, u[0], u[1])
    pc = _inverse_cdf(mix_c, u[2], u[3])
    return float(np.mean(pt > pc))


def prob_greater_quad(mix_t: BetaMixture, mix_c: BetaMixture) -> float:
    """P(p_t > p_c) by quadrature: sum_k w_k * int (1 - F_t(Q_k(u))) du.

    Substituting each control component's quantile function makes the
    integrand bounded, so a fixed composite Gauss-Legendre rule suffices.
    """
    w, a, b = mix_c.arrays()
    x = special.betaincinv(a[:, None], b[:, None], _GL_U[None, :])
    inner = 1.0 - mix_t.cdf(x)
    return float(np.clip(np.sum(w * (inner @ _GL_W)), 0.0, 1.0))


# --------------------------------------------------------------------------
# EM fitting


def _weighted_beta_mle(s1, s2, wsum, a, b, max_iter=100):
    """Maximize ``wsum*(lnG(a+b)-lnG(a)-lnG(b)) + (a-1)s1 + (b-1)s2``.

    The objective is concave in (a, b); damped Newton from the current point.
    """

    def objective(a, b):
        return wsum * (special.gammaln(a + b) - special.gammaln(a) - special.gammaln(b)) + (a - 1) * s1 + (b - 1) * s2

    f = objective(a, b)
    for _ in range(max_iter):
        pab = special.digamma(a + b)
        g = np.array([wsum * (pab - special.digamma(a)) + s1, wsum * (pab - special.digamma(b)) + s2])
        tab = special.polygamma(1, a + b)
        H = wsum * np.array(
            [[tab - special.polygamma(1, a), tab], [tab, tab - special.polygamma(1, b)]]
        )
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while True:
            na, nb = a + t * step[0], b + t * step[1]
            if na > 0 and nb > 0:
                nf = objective(na, nb)
                if nf >= f - 1e-12 * abs(f):
                    break
            t *= 0.5
            if t < 1e-12:
                na, nb, nf = a, b, f
                break
        converged = abs(na - a) <= 1e-10 * a and abs(nb - b) <= 1e-10 * b
        a, b, f = na, nb, nf
        if converged:
            break
    return a, b


def _moment_match(x, w=None):
    m = np.average(x, weights=w)
    v = np.average((x - m) ** 2, weights=w)
    v = max(v, 1e-12)
    s = m * (1 - m) / v - 1
    s = max(s, 1e-2)
    return m * s, (1 - m) * s


def _clamp(a, b):
    ca, cb = np.clip(a, PARAM_MIN, PARAM_MAX), np.clip(b, PARAM_MIN, PARAM_MAX)
    if np.any(ca != a) or np.any(cb != b):
        warnings.warn("beta mixture component hit parameter bounds; clamped", DegenerateComponentWarning)
    return ca, cb


def _component_logpdf(logx, log1mx, a, b):
    return (a - 1) * logx[:, None] + (b - 1) * log1mx[:, None] - special.betaln(a, b)


def _check_samples(samples):
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise ValueError(f"need at least 100 samples to fit a mixture, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(x <= 0) or np.any(x >= 1):
        raise ValueError("samples must lie strictly inside (0, 1)")
    return x


def _em(x, K, tol, max_iter):
    logx, log1mx = np.log(x), np.log1p(-x)
    # quantile-sliced initialization: K equal-probability slices, moment-matched
    order = np.argsort(x, kind="stable")
    slices = np.array_split(order, K)
    a = np.empty(K)
    b = np.empty(K)
    for k, idx in enumerate(slices):
        a[k], b[k] = _moment_match(x[idx])
    a, b = _clamp(a, b)
    w = np.full(K, 1.0 / K)
    trace = []
    for it in range(max_iter + 1):
        logp = np.log(w) + _component_logpdf(logx, log1mx, a, b)
        norm = special.logsumexp(logp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        if it > 0 and abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(trace[-1])):
            break
        if it == max_iter:
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        w = np.maximum(nk / nk.sum(), 1e-300)
        w /= w.sum()
        for k in range(K):
            if nk[k] < 1e-8:
                continue
            a[k], b[k] = _weighted_beta_mle(resp[:, k] @ logx, resp[:, k] @ log1mx, nk[k], a[k], b[k])
        a, b = _clamp(a, b)
    order = np.argsort(-w, kind="stable")
    return w[order], a[order], b[order], trace


def fit_mixture(samples, K=3, tol=1e-8, max_iter=1000, seed=None) -> BetaMixture:
    """Fit a K-component beta mixture to samples in (0, 1) by EM.

    Initialization is deterministic, so ``seed`` is accepted only for
    interface symmetry and has no effect on the result.
    """
    est = BetaMixtureEM(n_components=K, tol=tol, max_iter=max_iter, random_state=seed).fit(samples)
    return est.mixture_


def select_mixture(samples, K_max=3, tol=1e-8, max_iter=1000) -> BetaMixture:
    """Fit K = 1..K_max components and keep the one with the lowest AIC."""
    x = _check_samples(samples)
    best = None
    for K in range(1, K_max + 1):
        est = BetaMixtureEM(n_components=K, tol=tol, max_iter=max_iter).fit(x)
        if best is None or est.aic(x) < best.aic(x):
            best = est
    return best.mixture_


class BetaMixtureEM(BaseEstimator):
    """Estimator wrapper around beta-mixture EM.

    Parameters
    ----------
    n_components : int
        Number of beta components.
    tol : float
        Relative change in total log-likelihood that stops the iterations.
    max_iter : int
        Maximum number of EM iterations.
    random_state : int or None
        Unused by the deterministic initialization; if set, ``fit`` thins
        inputs larger than ``max_samples`` with this seed.
    max_samples : int or None
        Optional cap on the number of samples used.
    """

    def __init__(self, n_components=3, tol=1e-8, max_iter=1000, random_state=None, max_samples=None):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state
        self.max_samples = max_samples

    def fit(self, X, y=None):
        x = _check_samples(X)
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.max_samples is not None and x.size > self.max_samples:
            rng = stream(self.random_state or 0, STAGE_EM)
            x = rng.choice(x, size=self.max_samples, replace=False)
        w, a, b, trace = _em(x, int(self.n_components), self.tol, self.max_iter)
        self.mixture_ = BetaMixture(tuple(w / w.sum()), tuple(a), tuple(b))
        self.loglik_trace_ = np.asarray(trace)
        self.n_iter_ = len(trace) - 1
        self.converged_ = self.n_iter_ < self.max_iter
        return self

    def score_samples(self, X):
        check_is_fitted(self, "mixture_")
        return self.mixture_.logpdf(np.asarray(X, dtype=float))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def aic(self, X):
        x = np.asarray(X, dtype=float)
        k = 3 * self.n_components - 1
        return 2 * k - 2 * float(np.sum(self.score_samples(x)))

    def sample(self, n_samples=1, random_state=0):
        check_is_fitted(self, "mixture_")
        return self.mixture_.sample(n_samples, stream(random_state, STAGE_EM))

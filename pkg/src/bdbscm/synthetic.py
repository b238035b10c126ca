"""Synthetic control arms for a binary endpoint.

Each synthetic arm is one plausible future control arm. Its study-level
response rate is drawn once per arm, from a beta matched to the spread of the
historical rates (or fixed at the pooled rate), and then patients are
Bernoulli at that rate.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from bdbscm._rng import STAGE_SYNTH, stream
from bdbscm.data import as_counts
from bdbscm.exact import clopper_pearson

RATE_EPS = 1e-9


class RateModelError(ValueError):
    pass


@dataclass(frozen=True)
class RateModel:
    kind: str
    pooled_rate: float
    beta_a: float | None = None
    beta_b: float | None = None

    def __post_init__(self):
        if self.kind not in ("pooled", "beta_matched"):
            raise ValueError(f"unknown rate model kind {self.kind!r}")
        if not 0 < self.pooled_rate < 1:
            raise ValueError("pooled_rate must lie in (0, 1)")
        if self.kind == "beta_matched" and not (
            self.beta_a is not None and self.beta_b is not None and self.beta_a > 0 and self.beta_b > 0
        ):
            raise ValueError("beta_matched needs positive beta_a and beta_b")

    @property
    def mean(self) -> float:
        if self.kind == "pooled":
            return self.pooled_rate
        return self.beta_a / (self.beta_a + self.beta_b)

    def draw_rate(self, rng) -> float:
        if self.kind == "pooled":
            rate = self.pooled_rate
        else:
            rate = rng.beta(self.beta_a, self.beta_b)
        return float(np.clip(rate, RATE_EPS, 1 - RATE_EPS))

    def to_dict(self):
        d = {"kind": self.kind, "pooled_rate": self.pooled_rate}
        if self.kind == "beta_matched":
            d.update(beta_a=self.beta_a, beta_b=self.beta_b)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d["pooled_rate"]), d.get("beta_a"), d.get("beta_b"))


@dataclass
class SyntheticArm:
    outcomes: np.ndarray
    size: int
    drawn_rate: float

    def __post_init__(self):
        if len(self.outcomes) != self.size:
            raise ValueError("size must equal the number of outcomes")

    @property
    def responders(self) -> int:
        return int(self.outcomes.sum())


@dataclass(frozen=True)
class SynthSummary:
    mean_rate: float
    ci: tuple
    band: tuple
    size: int
    replicates: int
    representative_responders: int


def pooled_model(studies) -> RateModel:
    r, n = as_counts(studies)
    if r.size == 0:
        raise ValueError("need at least one study")
    return RateModel("pooled", float(np.clip(r.sum() / n.sum(), RATE_EPS, 1 - RATE_EPS)))


def fit_rate_distribution(studies, weighting="pooled") -> RateModel:
    """Moment-match a beta to the per-study response rates.

    The beta's variance is the sample variance of the study rates. Its mean is
    the pooled rate (``weighting="pooled"``, responders over patients) or the
    plain average of study rates (``"unweighted"``).
    """
    r, n = as_counts(studies)
    if r.size < 2:
        raise RateModelError("need at least two studies to estimate between-study spread")
    rates = r / n
    pooled = float(r.sum() / n.sum())
    if weighting == "pooled":
        m = pooled
    elif weighting == "unweighted":
        m = float(rates.mean())
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    v = float(rates.var(ddof=1))
    if v <= 0 or v >= m * (1 - m):
        raise RateModelError(
            f"study-rate variance {v:.4g} is infeasible for a beta with mean {m:.4g}; use pooled_model instead"
        )
    s = m * (1 - m) / v - 1
    return RateModel("beta_matched", pooled, m * s, (1 - m) * s)


def generate_arm(model: RateModel, size: int, seed=0, rng=None) -> SyntheticArm:
    """One synthetic arm; ``rng`` overrides ``seed`` when given."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if rng is None:
        rng = stream(seed, STAGE_SYNTH)
    rate = model.draw_rate(rng)
    outcomes = (rng.random(size) < rate).astype(np.uint8)
    return SyntheticArm(outcomes, int(size), rate)


def replicate_arm(model, size, seed, index):
    return generate_arm(model, size, rng=stream(seed, STAGE_SYNTH, index))


def synth_summary(model: RateModel, size: int, replicates=10_000, seed=0, level=0.95) -> SynthSummary:
    """Mean synthetic response rate and its interval.

    ``ci`` is the Clopper-Pearson interval of one representative arm of
    ``size`` patients at the mean rate; ``band`` is the empirical percentile
    band of the per-replicate rates.
    """
    if replicates < 1000:
        raise ValueError("synth_summary needs at least 1000 replicates")
    rates = np.array([replicate_arm(model, size, seed, i).responders / size for i in range(replicates)])
    mean_rate = float(rates.mean())
    rep = int(round(mean_rate * size))
    a = (1 - level) / 2
    return SynthSummary(
        mean_rate=mean_rate,
        ci=clopper_pearson(rep, size, level),
        band=(float(np.quantile(rates, a)), float(np.quantile(rates, 1 - a))),
        size=int(size),
        replicates=int(replicates),
        representative_responders=rep,
    )


def arms_to_csv(arms) -> str:
    buf = io.StringIO()
    buf.write("replicate,participant,outcome\n")
    for i, arm in enumerate(arms):
        for j, y in enumerate(arm.outcomes):
            buf.write(f"{i},{j},{int(y)}\n")
    return buf.getvalue()


class SyntheticControl(BaseEstimator):
    """Fit a rate model to historical studies and generate synthetic arms.

    Parameters
    ----------
    kind : {"beta_matched", "pooled"}
    weighting : {"pooled", "unweighted"}
        Centre of the matched beta (ignored for ``kind="pooled"``).
    size : int or None
        Arm size; ``None`` uses the rounded mean historical arm size.
    random_state : int
    """

    def __init__(self, kind="beta_matched", weighting="pooled", size=None, random_state=0):
        self.kind = kind
        self.weighting = weighting
        self.size = size
        self.random_state = random_state

    def fit(self, X, y=None):
        r, n = as_counts(X)
        if self.kind == "pooled":
            self.rate_model_ = pooled_model(X)
        elif self.kind == "beta_matched":
            self.rate_model_ = fit_rate_distribution(X, self.weighting)
        else:
            raise ValueError(f"unknown kind {self.kind!r}")
        self.size_ = int(round(float(n.mean()))) if self.size is None else int(self.size)
        return self

    def generate(self, n_arms=1):
        check_is_fitted(self, "rate_model_")
        return [replicate_arm(self.rate_model_, self.size_, self.random_state, i) for i in range(n_arms)]

    def summary(self, replicates=10_000):
        check_is_fitted(self, "rate_model_")
        return synth_summary(self.rate_model_, self.size_, replicates, self.random_state)

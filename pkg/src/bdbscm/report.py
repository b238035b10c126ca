"""Forest-plot rows, file emitters and the end-to-end comparison pipeline."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from bdbscm import __version__
from bdbscm._rng import derive_seed
from bdbscm.data import HistoricalStudy, summarize
from bdbscm.exact import clopper_pearson
from bdbscm.hierarchical import MAPPrior
from bdbscm.mixture import ess_moment, robustify
from bdbscm.oc import (
    DesignConfig,
    calibrate_effect,
    compare_designs,
    run_bdb_oc,
    run_scm_oc,
    total_information,
    tune_threshold,
)
from bdbscm.synthetic import fit_rate_distribution, synth_summary

OUTPUT_DIR_ENV = "BDBSCM_OUTPUT_DIR"
FOREST_KINDS = ("historical", "combined_mean", "map_prior", "synthetic")

# Published figures, kept next to ours in every report.
PUBLISHED = {
    "map_mean": 0.20,
    "map_interval": (0.02, 0.71),
    "synthetic_mean": 0.24,
    "synthetic_ci_results": (0.14, 0.36),
    "synthetic_ci_discussion": (0.16, 0.35),
    "ess": 7.4,
    "total_information": 63.7,
    "bdb_power": 0.580,
    "bdb_type1": 0.026,
    "scm_power": 0.641,
    "scm_type1": 0.027,
    "scm_n64_power": 0.639,
    "scm_n64_type1": 0.312,
    "power_diff_stated": 0.096,
}


class EmitError(OSError):
    pass


@dataclass(frozen=True)
class ForestRow:
    label: str
    estimate: float
    lo: float
    hi: float
    kind: str

    def __post_init__(self):
        if self.kind not in FOREST_KINDS:
            raise ValueError(f"unknown forest row kind {self.kind!r}")
        if not self.lo <= self.estimate <= self.hi:
            raise ValueError(f"{self.label}: estimate {self.estimate} outside [{self.lo}, {self.hi}]")

    @property
    def interval_type(self) -> str:
        return "credible" if self.kind == "map_prior" else "confidence"


def forest_rows(studies, map_summary, synth) -> list[ForestRow]:
    """Rows for the two forest plots.

    ``map_summary`` is a mapping with ``mean``, ``lo`` and ``hi``; ``synth``
    a :class:`~bdbscm.synthetic.SynthSummary`.
    """
    rows = []
    for s in studies:
        lo, hi = clopper_pearson(s.responders, s.arm_size)
        rows.append(ForestRow(s.id, s.rate, lo, hi, "historical"))
    summ = summarize(studies)
    lo, hi = clopper_pearson(summ.total_responders, summ.total_n)
    rows.append(ForestRow("combined mean", summ.pooled_rate, lo, hi, "combined_mean"))
    rows.append(ForestRow("MAP prior", map_summary["mean"], map_summary["lo"], map_summary["hi"], "map_prior"))
    rows.append(ForestRow("synthetic control", synth.mean_rate, synth.ci[0], synth.ci[1], "synthetic"))
    return rows


# --------------------------------------------------------------------------
# emitters


def resolve_output(path) -> Path:
    """Relative output paths land under ``$BDBSCM_OUTPUT_DIR`` when it is set."""
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "kind", "interval", "estimate", "lo", "hi"])
    for r in rows:
        writer.writerow([r.label, r.kind, r.interval_type, repr(r.estimate), repr(r.lo), repr(r.hi)])
    return buf.getvalue()


def rows_from_csv(text) -> list[ForestRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [ForestRow(d["label"], float(d["estimate"]), float(d["lo"]), float(d["hi"]), d["kind"]) for d in reader]


def to_json(obj) -> str:
    if isinstance(obj, list) and obj and isinstance(obj[0], ForestRow):
        obj = [asdict(r) for r in obj]
    elif hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _glyph(kind, x, y):
    if kind == "map_prior":  # credible interval: diamond
        return f'<polygon class="glyph credible" points="{x:.2f},{y - 6} {x + 6:.2f},{y} {x:.2f},{y + 6} {x - 6:.2f},{y}" fill="#b2182b"/>'
    if kind == "synthetic":
        return f'<rect class="glyph confidence" x="{x - 5:.2f}" y="{y - 5}" width="10" height="10" fill="#2166ac"/>'
    fill = "#444444" if kind == "historical" else "#000000"
    return f'<circle class="glyph confidence" cx="{x:.2f}" cy="{y}" r="4" fill="{fill}"/>'


def rows_to_svg(rows, title="Response rate (95% intervals)") -> str:
    left, width, top, step = 170, 420, 40, 26
    height = top + step * (len(rows) + 2)

    def sx(v):
        return left + width * v

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 40}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<text x="{left}" y="20">{title}</text>',
    ]
    for i, r in enumerate(rows):
        y = top + step * i
        dash = ' stroke-dasharray="4,2"' if r.interval_type == "credible" else ""
        out.append(f'<g class="interval {r.interval_type}" data-kind="{r.kind}">')
        out.append(f'<text x="8" y="{y + 4}">{r.label}</text>')
        out.append(f'<line x1="{sx(r.lo):.2f}" y1="{y}" x2="{sx(r.hi):.2f}" y2="{y}" stroke="#333333" stroke-width="2"{dash}/>')
        out.append(_glyph(r.kind, sx(r.estimate), y))
        out.append("</g>")
    axis_y = top + step * len(rows)
    out.append(f'<line x1="{left}" y1="{axis_y}" x2="{left + width}" y2="{axis_y}" stroke="#000000"/>')
    for t in range(0, 11, 2):
        v = t / 10
        out.append(f'<text x="{sx(v) - 8:.2f}" y="{axis_y + 16}">{v:.1f}</text>')
    out.append(
        f'<text x="{left}" y="{axis_y + 36}">circle/square: confidence interval; dashed diamond: credible interval</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit(obj, format, path) -> Path:
    """Write forest rows or a result object as CSV, JSON or SVG."""
    fmt = format.lower()
    if fmt == "csv":
        text = rows_to_csv(obj)
    elif fmt == "json":
        text = to_json(obj)
    elif fmt == "svg":
        text = rows_to_svg(obj)
    else:
        raise ValueError(f"unknown format {format!r}")
    p = resolve_output(path)
    try:
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise EmitError(f"cannot write {p}: {exc.strerror or exc}") from exc
    return p


# --------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelineSettings:
    seed: int = 42
    replicates: int = 10_000
    threads: int = 1
    predictive_draws: int = 10_000
    n_treat: int = 30
    n_control: int = 30
    robust_weight: float = 0.5
    target_power: float = 0.641
    target_type1: float = 0.026
    alpha: float = 0.05
    rate_weighting: str = "pooled"
    treatment_null: str = "shared"
    sensitivity_size: int = 64

    def digest(self, studies) -> str:
        d = asdict(self)
        d.pop("threads")
        d["studies"] = [(s.id, s.responders, s.arm_size) for s in studies]
        payload = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def build_map_prior(studies, settings: PipelineSettings):
    est = MAPPrior(
        n_predictive=settings.predictive_draws,
        random_state=derive_seed(settings.seed, "map"),
        n_jobs=settings.threads,
    ).fit(studies)
    robust = robustify(est.mixture_, settings.robust_weight)
    return est, robust


def map_report(est, robust):
    summ = est.summary()
    diag = est.diagnostics_
    return {
        "hyperpriors": {
            "mu_prior_mean": est.mu_prior_mean,
            "mu_prior_sd": est.mu_prior_sd,
            "tau_prior_scale": est.tau_prior_scale,
        },
        "sampler": {"n_chains": est.n_chains, "n_warmup": est.n_warmup, "n_kept": est.n_kept},
        "diagnostics": {
            "rhat": diag.rhat,
            "effective_draws": diag.effective_draws,
            "acceptance_rate": diag.acceptance_rate,
            "converged": diag.converged,
        },
        "predictive": summ["draws"],
        "mixture_summary": summ["mixture"],
        "mixture": [{"w": w, "a": a, "b": b} for w, a, b in est.mixture_.components],
        "robust_mixture": [{"w": w, "a": a, "b": b} for w, a, b in robust.components],
        "ess_map": ess_moment(est.mixture_),
        "ess_robust": ess_moment(robust),
        "posterior_mean_tau": float(est.draws_.tau.mean()),
    }


def scm_config(studies, settings, delta, size, rate_model=None):
    rate_model = rate_model or fit_rate_distribution(studies, settings.rate_weighting)
    return DesignConfig(
        n_treat=settings.n_treat,
        n_control=settings.n_control,
        p_control_true=summarize(studies).pooled_rate,
        delta=delta,
        alpha=settings.alpha,
        replicates=settings.replicates,
        seed=derive_seed(settings.seed, "oc"),
        rate_model=rate_model,
        synth_size=size,
        treatment_null=settings.treatment_null,
    )


def reproduce(studies: list[HistoricalStudy], settings: PipelineSettings | None = None) -> dict:
    """Run both pipelines end to end and assemble the comparison report."""
    settings = settings or PipelineSettings()
    summ = summarize(studies)
    synth_size = int(round(summ.mean_arm_size))

    est, robust = build_map_prior(studies, settings)
    map_part = map_report(est, robust)

    rate_model = fit_rate_distribution(studies, settings.rate_weighting)
    synth = synth_summary(rate_model, synth_size, settings.replicates, derive_seed(settings.seed, "synth"))

    delta = calibrate_effect(settings.target_power, summ.pooled_rate, synth_size, settings.n_treat, settings.alpha)

    scm_cfg = scm_config(studies, settings, delta, synth_size, rate_model)
    scm = run_scm_oc(scm_cfg, threads=settings.threads)
    scm64 = run_scm_oc(replace(scm_cfg, synth_size=settings.sensitivity_size), threads=settings.threads)

    bdb_cfg = replace(scm_cfg, prior=robust, rate_model=None)
    eta, tuned_type1 = tune_threshold(bdb_cfg, settings.target_type1, threads=settings.threads)
    bdb = run_bdb_oc(replace(bdb_cfg, decision_threshold=eta), threads=settings.threads)

    comparison = compare_designs(bdb, scm)
    rows = forest_rows(studies, map_part["mixture_summary"], synth)

    return {
        "tool_version": __version__,
        "seed": settings.seed,
        "config_digest": settings.digest(studies),
        "settings": asdict(settings) | {"threads": None},
        "data": {
            "studies": [{"id": s.id, "responders": s.responders, "n": s.arm_size} for s in studies],
            "pooled_rate": summ.pooled_rate,
            "mean_arm_size": summ.mean_arm_size,
            "total_n": summ.total_n,
            "total_responders": summ.total_responders,
        },
        "map_prior": map_part | {"published": {"mean": PUBLISHED["map_mean"], "interval": PUBLISHED["map_interval"]}},
        "information": {
            "ess_map": map_part["ess_map"],
            "ess_robust": map_part["ess_robust"],
            "total_information_map_ess": total_information(
                settings.n_treat, settings.n_control, map_part["ess_map"], settings.robust_weight
            ),
            "total_information_robust_ess": total_information(
                settings.n_treat, settings.n_control, map_part["ess_robust"], settings.robust_weight
            ),
            "published": {"ess": PUBLISHED["ess"], "total_information": PUBLISHED["total_information"]},
        },
        "synthetic": {
            "rate_model": rate_model.to_dict(),
            "size": synth_size,
            "mean_rate": synth.mean_rate,
            "ci": synth.ci,
            "percentile_band": synth.band,
            "published": {
                "mean": PUBLISHED["synthetic_mean"],
                "ci_results": PUBLISHED["synthetic_ci_results"],
                "ci_discussion": PUBLISHED["synthetic_ci_discussion"],
            },
        },
        "calibration": {
            "target_power": settings.target_power,
            "p_control": summ.pooled_rate,
            "n_control": synth_size,
            "n_treat": settings.n_treat,
            "delta": delta,
        },
        "scm": scm.to_dict() | {"published": {"power": PUBLISHED["scm_power"], "type1": PUBLISHED["scm_type1"]}},
        "scm_n64": scm64.to_dict()
        | {
            "published": {
                "power": PUBLISHED["scm_n64_power"],
                "type1": PUBLISHED["scm_n64_type1"],
                "type1_is_target": False,
                "note": "published n=64 type 1 error of 0.312 is not reproducible by an exact test at alpha=0.05; shown for reference only",
            }
        },
        "bdb": bdb.to_dict()
        | {
            "threshold_tuning": {"target_type1": settings.target_type1, "threshold": eta, "type1": tuned_type1},
            "published": {"power": PUBLISHED["bdb_power"], "type1": PUBLISHED["bdb_type1"]},
        },
        "comparison": comparison.to_dict()
        | {
            "published": {
                "power_diff_from_results": round(PUBLISHED["scm_power"] - PUBLISHED["bdb_power"], 3),
                "power_diff_stated": PUBLISHED["power_diff_stated"],
            }
        },
        "forest": [asdict(r) for r in rows],
    }

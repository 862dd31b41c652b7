"""Model diagnostics: stratified NRMSE, memory-retention curves, importance.

Three read-only probes of a trained model.  Retention curves corrupt the
context window beyond a preserved lag and watch the error grow; modality
importance permutes one feature block at a time; the report stratifies
error by site and condition (growing season, extreme events).  Everything
is deterministic given (seed, repeats) and is emitted as tidy CSV plus a
JSON summary for downstream plotting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    MODALITY_SLICES,
    SampleSet,
    SiteNorm,
    SiteSeries,
    apply_norms,
    denormalize_predictions,
)
from .models import Model

__all__ = [
    "STREAM_PERMUTE",
    "CONDITIONS",
    "EvaluationError",
    "ConditionSet",
    "DiagnosticCurve",
    "ImportanceReport",
    "EvalReport",
    "nrmse",
    "condition_masks",
    "predict_raw",
    "memory_retention_curve",
    "min_error_lag",
    "modality_importance",
    "evaluate_report",
    "write_curves_csv",
    "write_importance_csv",
    "write_report_csv",
    "write_summary_json",
]

STREAM_PERMUTE = 53

CONDITIONS = ("overall", "growing", "gpp_neg", "gpp_pos")


class EvaluationError(ValueError):
    """Diagnostic asked of data that cannot support it."""


# ------------------------------------------------------------------- NRMSE


def nrmse(predictions, observations, normalizer: str = "mean") -> float:
    """Root-mean-squared error over the magnitude of a spread statistic.

    ``normalizer`` picks the denominator: "mean" (default), "range"
    (max - min), or "std".  A denominator of zero is undefined and raises.
    """
    p = np.asarray(predictions, dtype=np.float64)
    o = np.asarray(observations, dtype=np.float64)
    if p.shape != o.shape or p.ndim != 1:
        raise EvaluationError(f"shape mismatch: {p.shape} vs {o.shape}")
    if p.size < 2:
        raise EvaluationError("need at least 2 points")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(o))):
        raise EvaluationError("non-finite values")
    rmse = float(np.sqrt(np.mean((p - o) ** 2)))
    if normalizer == "mean":
        scale = abs(float(o.mean()))
    elif normalizer == "range":
        scale = float(o.max() - o.min())
    elif normalizer == "std":
        scale = float(o.std())
    else:
        raise EvaluationError(f"unknown normalizer {normalizer!r}")
    if scale <= 1e-12 * max(1.0, float(np.abs(o).max(initial=0.0))):
        raise EvaluationError(f"normalizer {normalizer!r} is zero for these observations")
    return rmse / scale


# -------------------------------------------------------------- conditions


@dataclass
class ConditionSet:
    """Per-sample condition membership, aligned to one site's samples."""

    overall: np.ndarray
    growing: np.ndarray
    gpp_neg: np.ndarray
    gpp_pos: np.ndarray

    def __post_init__(self):
        n = self.overall.shape
        for name in ("growing", "gpp_neg", "gpp_pos"):
            m = getattr(self, name)
            if m.shape != n:
                raise EvaluationError("condition masks disagree on length")
            if np.any(m & ~self.overall):
                raise EvaluationError(f"{name} must be a subset of overall")
        if np.any(self.gpp_neg & self.gpp_pos):
            raise EvaluationError("a sample cannot be both extremes at once")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "overall": self.overall,
            "growing": self.growing,
            "gpp_neg": self.gpp_neg,
            "gpp_pos": self.gpp_pos,
        }


def condition_masks(series: SiteSeries, samples: SampleSet) -> ConditionSet:
    """Look up each sample's target day in the site's daily condition flags."""
    if len(samples) and not np.all(samples.site_ids == series.site_id):
        raise EvaluationError(f"samples are not all from site {series.site_id}")
    offsets = (samples.target_dates - series.dates[0]).astype("timedelta64[D]").astype(int)
    if len(samples) and (offsets.min() < 0 or offsets.max() >= len(series)):
        raise EvaluationError(f"sample target dates fall outside site {series.site_id}")
    return ConditionSet(
        overall=np.ones(len(samples), dtype=bool),
        growing=series.flags.growing[offsets],
        gpp_neg=series.flags.extreme_neg[offsets],
        gpp_pos=series.flags.extreme_pos[offsets],
    )


# ------------------------------------------------------------- predictions


def predict_raw(
    model: Model,
    samples: SampleSet,
    norms: dict[str, SiteNorm],
    batch_size: int = 256,
) -> np.ndarray:
    """Predict in physical units: standardize, run the model, denormalize."""
    z = apply_norms(samples, norms)
    preds = model.predict(z.contexts, batch_size=batch_size)
    return denormalize_predictions(preds, samples.site_ids, norms)


def _observations(samples: SampleSet, against: str) -> np.ndarray:
    if against == "raw":
        return samples.targets
    if against == "smoothed":
        return samples.targets_smoothed
    raise EvaluationError(f"against must be 'raw' or 'smoothed', got {against!r}")


def _sole_site(samples: SampleSet) -> str:
    ids = set(samples.site_ids.tolist())
    return ids.pop() if len(ids) == 1 else "pooled"


# --------------------------------------------------------- memory retention


@dataclass
class DiagnosticCurve:
    """NRMSE as a function of the preserved lag tau.

    ``values[i, r]`` is the NRMSE at ``taus[i]`` for repeat ``r``;
    ``nrmse_at_tau`` is its median over repeats.
    """

    site_id: str
    condition: str
    taus: tuple[int, ...]
    nrmse_at_tau: tuple[float, ...]
    repeats: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.taus)
        if t.size == 0 or np.any(np.diff(t) <= 0):
            raise EvaluationError("taus must be non-empty and strictly increasing")
        if len(self.nrmse_at_tau) != t.size or self.values.shape != (t.size, self.repeats):
            raise EvaluationError("curve arrays disagree on shape")
        if min(self.nrmse_at_tau) < 0:
            raise EvaluationError("NRMSE cannot be negative")


def memory_retention_curve(
    model: Model,
    samples: SampleSet,
    norms: dict[str, SiteNorm],
    taus: Sequence[int] | None = None,
    repeats: int = 20,
    seed: int = 0,
    per_row: bool = False,
    normalizer: str = "mean",
    against: str = "raw",
    condition: str = "overall",
    batch_size: int = 256,
) -> DiagnosticCurve:
    """Corrupt context rows older than each preserved lag tau and re-score.

    Rows at window position j carry lag k-1-j (the last row is the target
    day).  For a given tau, all rows with lag > tau are replaced by the
    same-position rows of other samples under one sample permutation per
    repeat; the newest tau+1 rows are never touched.  ``per_row=True`` draws
    an independent permutation per row position instead, which also breaks
    within-block temporal coherence.
    """
    n = len(samples)
    if n < 2:
        raise EvaluationError("permutation diagnostics need at least 2 samples")
    k = samples.contexts.shape[1]
    if taus is None:
        taus = range(k)
    taus = tuple(int(t) for t in taus)
    if any(t < 0 or t > k - 1 for t in taus):
        raise EvaluationError(f"taus must lie in [0, {k - 1}]")
    if np.any(np.diff(taus) <= 0):
        raise EvaluationError("taus must be strictly increasing")

    z = apply_norms(samples, norms)
    base = z.contexts
    obs = _observations(samples, against)

    def score(contexts: np.ndarray) -> float:
        preds = model.predict(contexts, batch_size=batch_size)
        preds = denormalize_predictions(preds, samples.site_ids, norms)
        return nrmse(preds, obs, normalizer)

    baseline = score(base)
    values = np.empty((len(taus), repeats))
    for rep in range(repeats):
        rng = np.random.default_rng([seed, STREAM_PERMUTE, rep])
        # drawn once per repeat so tau only moves the permuted/preserved cut
        row_perms = [rng.permutation(n) for _ in range(k)] if per_row else None
        perm = rng.permutation(n) if not per_row else None
        for ti, tau in enumerate(taus):
            cut = k - 1 - tau  # rows [0, cut) are older than tau
            if cut == 0:
                values[ti, rep] = baseline  # no permutation applied
                continue
            ctx = base.copy()
            if per_row:
                for j in range(cut):
                    ctx[:, j, :] = base[row_perms[j], j, :]
            else:
                ctx[:, :cut, :] = base[perm, :cut, :]
            assert np.array_equal(ctx[:, cut:, :], base[:, cut:, :])  # newest rows intact
            values[ti, rep] = score(ctx)

    return DiagnosticCurve(
        site_id=_sole_site(samples),
        condition=condition,
        taus=taus,
        nrmse_at_tau=tuple(float(v) for v in np.median(values, axis=1)),
        repeats=repeats,
        values=values,
    )


def min_error_lag(curves) -> tuple[int, float]:
    """Preserved lag with the lowest NRMSE, ties toward the smaller lag.

    Accepts one curve or several (same tau grid); several are aggregated by
    the per-tau median across curves.
    """
    if isinstance(curves, DiagnosticCurve):
        curves = [curves]
    if not curves:
        raise EvaluationError("no curves given")
    taus = curves[0].taus
    if any(c.taus != taus for c in curves):
        raise EvaluationError("curves disagree on tau grid")
    agg = np.median(np.array([c.nrmse_at_tau for c in curves]), axis=0)
    i = int(np.argmin(agg))  # argmin returns the first minimum: smallest tau
    return taus[i], float(agg[i])


# ------------------------------------------------------------- importance


@dataclass
class ImportanceReport:
    """Per-modality NRMSE increase when that feature block is shuffled.

    A single ``baseline`` (the unperturbed NRMSE) applies to every modality;
    ``permuted[m][r]`` is the NRMSE with modality m shuffled on repeat r, and
    ``fi[m]`` is the median over repeats of (permuted - baseline).
    """

    baseline: float
    modalities: tuple[str, ...]
    permuted: dict[str, np.ndarray]
    fi: dict[str, float]
    repeats: int

    def __post_init__(self):
        for m in self.modalities:
            if self.permuted[m].shape != (self.repeats,):
                raise EvaluationError("per-repeat values disagree with repeat count")


def modality_importance(
    model: Model,
    samples: SampleSet,
    norms: dict[str, SiteNorm],
    slices: dict[str, slice] | None = None,
    repeats: int = 20,
    seed: int = 0,
    normalizer: str = "mean",
    against: str = "raw",
    batch_size: int = 256,
) -> ImportanceReport:
    """Permute one modality's columns across samples, others fixed.

    All context rows of the chosen columns move together under one sample
    permutation, drawn independently per (repeat, modality).
    """
    if len(samples) < 2:
        raise EvaluationError("permutation diagnostics need at least 2 samples")
    if slices is None:
        slices = MODALITY_SLICES
    z = apply_norms(samples, norms)
    base = z.contexts
    obs = _observations(samples, against)

    def score(contexts: np.ndarray) -> float:
        preds = model.predict(contexts, batch_size=batch_size)
        preds = denormalize_predictions(preds, samples.site_ids, norms)
        return nrmse(preds, obs, normalizer)

    baseline = score(base)
    permuted = {m: np.empty(repeats) for m in slices}
    for rep in range(repeats):
        rng = np.random.default_rng([seed, STREAM_PERMUTE, rep])
        for m, sl in slices.items():
            perm = rng.permutation(len(samples))
            ctx = base.copy()
            ctx[:, :, sl] = base[perm][:, :, sl]
            permuted[m][rep] = score(ctx)
    return ImportanceReport(
        baseline=baseline,
        modalities=tuple(slices),
        permuted=permuted,
        fi={m: float(np.median(permuted[m] - baseline)) for m in slices},
        repeats=repeats,
    )


# ----------------------------------------------------------------- report


@dataclass
class EvalReport:
    """Per-site, per-condition NRMSE plus order-statistics summaries."""

    rows: list[dict]  # {"site_id", "condition", "n", "nrmse"}
    summary: list[dict]  # per condition: median / q25 / q75 / q05 / q95 over sites
    normalizer: str
    against: str


def evaluate_report(
    model: Model,
    sites: Sequence[SiteSeries],
    samples: SampleSet,
    norms: dict[str, SiteNorm],
    normalizer: str = "mean",
    against: str = "raw",
    batch_size: int = 256,
) -> EvalReport:
    """Score a sample split stratified by site and condition.

    Conditions with fewer than two samples at a site are absent from the
    table (NRMSE is undefined there), never reported as zero.
    """
    if len(samples) == 0:
        raise EvaluationError("no samples to evaluate")
    preds = predict_raw(model, samples, norms, batch_size=batch_size)
    obs = _observations(samples, against)
    rows: list[dict] = []
    for site in sites:
        at_site = samples.site_ids == site.site_id
        if not at_site.any():
            continue
        masks = condition_masks(site, samples.select(at_site))
        p, o = preds[at_site], obs[at_site]
        for cond, mask in masks.as_dict().items():
            if mask.sum() < 2:
                continue
            rows.append(
                {
                    "site_id": site.site_id,
                    "condition": cond,
                    "n": int(mask.sum()),
                    "nrmse": nrmse(p[mask], o[mask], normalizer),
                }
            )
    summary = []
    for cond in CONDITIONS:
        vals = np.array([r["nrmse"] for r in rows if r["condition"] == cond])
        if vals.size == 0:
            continue
        q05, q25, q50, q75, q95 = np.quantile(vals, [0.05, 0.25, 0.5, 0.75, 0.95])
        summary.append(
            {
                "condition": cond,
                "n_sites": int(vals.size),
                "median": float(q50),
                "q25": float(q25),
                "q75": float(q75),
                "q05": float(q05),
                "q95": float(q95),
            }
        )
    return EvalReport(rows=rows, summary=summary, normalizer=normalizer, against=against)


# ----------------------------------------------------------------- writers


def _write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def write_curves_csv(curves: Sequence[DiagnosticCurve], path) -> None:
    """One row per site x condition x tau x repeat."""

    def rows():
        for c in curves:
            for ti, tau in enumerate(c.taus):
                for rep in range(c.repeats):
                    yield c.site_id, c.condition, tau, rep, float(c.values[ti, rep])

    _write_csv(path, ("site_id", "condition", "tau", "repeat", "nrmse"), rows())


def write_importance_csv(reports: Sequence[tuple[str, ImportanceReport]], path) -> None:
    """One row per site x modality x repeat, with the shared baseline."""

    def rows():
        for site_id, rep in reports:
            for m in rep.modalities:
                for r in range(rep.repeats):
                    yield site_id, m, r, rep.baseline, float(rep.permuted[m][r])

    _write_csv(
        path, ("site_id", "modality", "repeat", "baseline_nrmse", "permuted_nrmse"), rows()
    )


def write_report_csv(report: EvalReport, path) -> None:
    _write_csv(
        path,
        ("site_id", "condition", "n", "nrmse"),
        ((r["site_id"], r["condition"], r["n"], r["nrmse"]) for r in report.rows),
    )


def write_summary_json(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")

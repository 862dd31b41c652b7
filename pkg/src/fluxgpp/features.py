"""Tower-level feature engineering: vegetation-index PCA, radar features,
gap interpolation, LOWESS smoothing, and anomaly/extreme flagging.

Everything here is a pure function over numpy arrays.  Missing values are
NaN throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BAND_NAMES",
    "VI_NAMES",
    "PcaModel",
    "ConditionFlags",
    "compute_vis",
    "pca_fit",
    "pca_transform",
    "dprvi",
    "to_db",
    "from_db",
    "interpolate_gaps",
    "lowess_smooth",
    "seasonal_anomalies",
    "extreme_candidates",
    "flag_extremes",
    "growing_season_mask",
    "N_S2_SCORES",
]

# Reflectance band order expected by compute_vis.
BAND_NAMES = ("blue", "green", "red", "rededge", "nir", "swir")
VI_NAMES = ("ndvi", "kndvi", "evi", "nirv", "ndre")

N_S2_SCORES = 18  # fixed width of the PCA score block in a token


# ------------------------------------------------------------------ indices


def compute_vis(bands: np.ndarray) -> np.ndarray:
    """Vegetation indices from reflectances in [0, 1].

    ``bands``: (..., 6) in BAND_NAMES order -> (..., 5) in VI_NAMES order.
    Zero-sum denominators yield NaN (missing), not errors.
    """
    bands = np.asarray(bands, dtype=np.float64)
    if bands.shape[-1] != len(BAND_NAMES):
        raise ValueError(f"expected {len(BAND_NAMES)} bands in {BAND_NAMES} order")
    if np.nanmin(bands) < 0.0 or np.nanmax(bands) > 1.0:
        raise ValueError("reflectances must lie in [0, 1]")
    blue = bands[..., 0]
    red = bands[..., 2]
    rededge = bands[..., 3]
    nir = bands[..., 4]

    def safe_ratio(num, den):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den != 0.0, num / np.where(den == 0.0, 1.0, den), np.nan)

    ndvi = safe_ratio(nir - red, nir + red)
    kndvi = np.tanh(ndvi**2)
    evi = safe_ratio(2.5 * (nir - red), nir + 6.0 * red - 7.5 * blue + 1.0)
    nirv = ndvi * nir
    ndre = safe_ratio(nir - rededge, nir + rededge)
    return np.stack([ndvi, kndvi, evi, nirv, ndre], axis=-1)


def dprvi(gamma_vv, gamma_vh):
    """Dual-polarised radar vegetation index from linear-power backscatter.

    4*vh / (vv + vh), in [0, 4]; both-zero inputs yield NaN (missing).
    """
    vv = np.asarray(gamma_vv, dtype=np.float64)
    vh = np.asarray(gamma_vh, dtype=np.float64)
    if np.any(vv < 0.0) or np.any(vh < 0.0):
        raise ValueError("backscatter powers must be non-negative")
    total = vv + vh
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(total > 0.0, 4.0 * vh / np.where(total == 0.0, 1.0, total), np.nan)
    return out if out.ndim else float(out)


def to_db(linear):
    """Linear power to decibels; non-positive input -> NaN (missing)."""
    lin = np.asarray(linear, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(lin > 0.0, 10.0 * np.log10(np.where(lin <= 0.0, 1.0, lin)), np.nan)
    return out if out.ndim else float(out)


def from_db(db):
    db = np.asarray(db, dtype=np.float64)
    out = 10.0 ** (db / 10.0)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------- PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (n_components, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # (n_components,), non-increasing
    n_components: int


def pca_fit(x: np.ndarray, variance_target: float = 0.99, max_components: int = N_S2_SCORES) -> PcaModel:
    """Principal components of a (days x indices) matrix via SVD.

    Keeps the smallest count whose cumulative explained-variance ratio
    exceeds ``variance_target``, capped at ``max_components``.  Zero-variance
    directions (rank deficiency) are dropped before selection.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_fit needs a 2-D matrix with at least 2 rows")
    if np.any(~np.isfinite(x)):
        raise ValueError("pca_fit input must be complete (interpolate gaps first)")
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals**2
    total = var.sum()
    if total <= 0.0:
        raise ValueError("input matrix has no variance")
    keep = svals > svals[0] * 1e-12  # drop numerically zero-variance components
    var, vt = var[keep], vt[keep]
    ratios = var / total
    cumulative = np.cumsum(ratios)
    n = int(np.searchsorted(cumulative, variance_target, side="right") + 1)
    n = min(n, len(ratios), max_components)
    return PcaModel(
        mean=mean,
        components=vt[:n].copy(),
        explained_variance_ratio=ratios[:n].copy(),
        n_components=n,
    )


def pca_transform(model: PcaModel, x: np.ndarray, width: int = N_S2_SCORES) -> np.ndarray:
    """Project onto the fitted components; scores zero-padded to ``width``.

    The pad keeps the token layout fixed when fewer components reach the
    variance target than the layout reserves.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.shape[-1] != model.mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: model is {model.mean.shape[0]}-d, input is {rows.shape[-1]}-d"
        )
    scores = (rows - model.mean) @ model.components.T
    if model.n_components > width:
        scores = scores[:, :width]
    elif model.n_components < width:
        pad = np.zeros((rows.shape[0], width - model.n_components))
        scores = np.concatenate([scores, pad], axis=1)
    return scores[0] if single else scores


# ----------------------------------------------------------- interpolation


def interpolate_gaps(series: np.ndarray) -> np.ndarray:
    """Linear interpolation over NaN gaps; edges extended from the nearest
    observation.  Raises on an all-missing series."""
    series = np.asarray(series, dtype=np.float64)
    observed = np.isfinite(series)
    if not observed.any():
        raise ValueError("cannot interpolate an all-missing series")
    if observed.all():
        return series.copy()
    idx = np.arange(series.size)
    return np.interp(idx, idx[observed], series[observed])


# ------------------------------------------------------------------ LOWESS


def lowess_smooth(series: np.ndarray, frac: float = 0.08, iterations: int = 2) -> np.ndarray:
    """Robust locally weighted linear regression on a daily series.

    Tricube neighbourhood weights over the ``ceil(frac*n)`` nearest points,
    local first-degree fits, and ``iterations`` bisquare re-weighting passes
    that pull the fit off outliers.
    """
    y = np.asarray(series, dtype=np.float64)
    n = y.size
    if n < 3:
        raise ValueError("series shorter than 3")
    if np.any(~np.isfinite(y)):
        raise ValueError("series must be complete (interpolate gaps first)")
    span = int(np.ceil(frac * n))
    if span < 3:
        raise ValueError(f"frac={frac} gives {span} points per neighbourhood; need >= 3")
    span = min(span, n)
    x = np.arange(n, dtype=np.float64)

    # Nearest-neighbour windows on a regular grid: a sliding index range.
    half = span // 2
    starts = np.clip(np.arange(n) - half, 0, n - span)
    offsets = np.arange(span)
    win = starts[:, None] + offsets[None, :]  # (n, span) neighbour indices
    dist = np.abs(x[win] - x[:, None])
    hmax = dist.max(axis=1, keepdims=True)
    hmax[hmax == 0.0] = 1.0
    tricube = (1.0 - np.minimum(dist / hmax, 1.0) ** 3) ** 3

    robust = np.ones_like(y)
    fitted = y.copy()
    for _ in range(iterations + 1):
        w = tricube * robust[win]
        xw = x[win]
        yw = y[win]
        sw = w.sum(axis=1)
        sx = (w * xw).sum(axis=1)
        sy = (w * yw).sum(axis=1)
        sxx = (w * xw * xw).sum(axis=1)
        sxy = (w * xw * yw).sum(axis=1)
        det = sw * sxx - sx * sx
        # weighted least squares for a line; fall back to weighted mean when
        # the window degenerates
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(det > 1e-12 * sxx * sw, (sw * sxy - sx * sy) / det, 0.0)
            icept = np.where(
                det > 1e-12 * sxx * sw, (sxx * sy - sx * sxy) / det, sy / np.where(sw == 0, 1, sw)
            )
        fitted = icept + slope * x
        resid = y - fitted
        s = np.median(np.abs(resid))
        if s <= 0.0:
            break
        robust = np.clip(resid / (6.0 * s), -1.0, 1.0)
        robust = (1.0 - robust**2) ** 2
    return fitted


# ---------------------------------------------------------------- anomalies


def _day_of_year_merged(dates: np.ndarray) -> np.ndarray:
    """Day-of-year with Feb 29 merged into day 59, so every year spans 1..365."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    years = dates.astype("datetime64[Y]")
    doy = (dates - years).astype(int) + 1
    is_leap = ((years + 1).astype("datetime64[D]") - years.astype("datetime64[D]")).astype(int) == 366
    return np.where(is_leap & (doy > 59), doy - 1, doy)


def seasonal_anomalies(gpp: np.ndarray, dates: np.ndarray) -> np.ndarray:
    """Deviation from the cross-year day-of-year mean cycle.

    NaN observations are excluded from the cycle and propagate to their own
    anomaly.  Raises if any day-of-year present has no observation in any
    year, or if the record spans fewer than 2 distinct years.
    """
    gpp = np.asarray(gpp, dtype=np.float64)
    dates = np.asarray(dates, dtype="datetime64[D]")
    if gpp.shape != dates.shape:
        raise ValueError("gpp and dates must align")
    if len(np.unique(dates.astype("datetime64[Y]"))) < 2:
        raise ValueError("seasonal cycle needs at least 2 years of data")
    doy = _day_of_year_merged(dates)
    observed = np.isfinite(gpp)
    counts = np.bincount(doy[observed], minlength=366)
    sums = np.bincount(doy[observed], weights=gpp[observed], minlength=366)
    present = np.bincount(doy, minlength=366) > 0
    empty = present & (counts == 0)
    if np.any(empty):
        raise ValueError(f"day-of-year {np.flatnonzero(empty).tolist()} has no observations")
    with np.errstate(invalid="ignore"):
        cycle = sums / np.where(counts == 0, 1, counts)
    return gpp - cycle[doy]


def extreme_candidates(
    anomalies: np.ndarray, lower: float = 0.10, upper: float = 0.90
) -> tuple[np.ndarray, np.ndarray]:
    """Per-day candidate flags below/above the linear-interpolation quantiles."""
    anomalies = np.asarray(anomalies, dtype=np.float64)
    finite = anomalies[np.isfinite(anomalies)]
    if finite.size == 0:
        zeros = np.zeros(anomalies.shape, dtype=bool)
        return zeros, zeros.copy()
    lo = np.quantile(finite, lower)  # numpy default is the type-7 estimator
    hi = np.quantile(finite, upper)
    with np.errstate(invalid="ignore"):
        neg = anomalies < lo
        pos = anomalies > hi
    return neg, pos


def _runs_of_at_least(mask: np.ndarray, min_len: int) -> np.ndarray:
    """Keep only True-runs of at least ``min_len`` consecutive entries."""
    out = np.zeros_like(mask)
    n = mask.size
    i = 0
    while i < n:
        if mask[i]:
            j = i
            while j < n and mask[j]:
                j += 1
            if j - i >= min_len:
                out[i:j] = True
            i = j
        else:
            i += 1
    return out


@dataclass
class ConditionFlags:
    """Per-day condition masks for a site record."""

    extreme_neg: np.ndarray
    extreme_pos: np.ndarray
    growing: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.growing is None:
            self.growing = np.zeros_like(self.extreme_neg)
        if np.any(self.extreme_neg & self.extreme_pos):
            raise ValueError("a day cannot be both extremes at once")


def flag_extremes(
    anomalies: np.ndarray,
    dates: np.ndarray | None = None,
    lower: float = 0.10,
    upper: float = 0.90,
    min_run: int = 5,
) -> ConditionFlags:
    """Extreme-event flags: tail candidates filtered to runs >= ``min_run`` days.

    When ``dates`` is given the May-September growing-season mask is filled
    in too; otherwise it is all-False.
    """
    neg_cand, pos_cand = extreme_candidates(anomalies, lower, upper)
    flags = ConditionFlags(
        extreme_neg=_runs_of_at_least(neg_cand, min_run),
        extreme_pos=_runs_of_at_least(pos_cand, min_run),
    )
    if dates is not None:
        flags.growing = growing_season_mask(dates)
    return flags


def growing_season_mask(dates: np.ndarray) -> np.ndarray:
    """True for days whose month is May through September."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    months = dates.astype("datetime64[M]").astype(int) % 12 + 1
    return (months >= 5) & (months <= 9)

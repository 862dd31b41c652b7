import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.nonparametric.smoothers_lowess import lowess as sm_lowess

from fluxgpp.features import (
    ConditionFlags,
    compute_vis,
    dprvi,
    extreme_candidates,
    flag_extremes,
    from_db,
    growing_season_mask,
    to_db,
    interpolate_gaps,
    lowess_smooth,
    pca_fit,
    pca_transform,
    seasonal_anomalies,
)

# ------------------------------------------------------------------ indices


def test_vis_known_values():
    # blue, green, red, rededge, nir, swir
    bands = np.array([0.05, 0.08, 0.10, 0.20, 0.40, 0.25])
    vis = compute_vis(bands)
    ndvi = (0.40 - 0.10) / (0.40 + 0.10)
    assert vis[0] == pytest.approx(ndvi)
    assert vis[1] == pytest.approx(np.tanh(ndvi**2))
    assert vis[2] == pytest.approx(2.5 * 0.30 / (0.40 + 0.6 - 0.375 + 1.0))
    assert vis[3] == pytest.approx(ndvi * 0.40)
    assert vis[4] == pytest.approx((0.40 - 0.20) / (0.40 + 0.20))


def test_vis_zero_denominator_is_missing():
    bands = np.zeros(6)  # nir + red == 0
    vis = compute_vis(bands)
    assert np.isnan(vis[0]) and np.isnan(vis[1]) and np.isnan(vis[4])


def test_vis_nan_bands_propagate():
    bands = np.array([0.05, 0.08, np.nan, 0.20, 0.40, 0.25])
    vis = compute_vis(bands)
    assert np.isnan(vis[0])  # ndvi needs red
    assert np.isfinite(vis[4])  # ndre does not


def test_vis_rejects_out_of_range():
    with pytest.raises(ValueError):
        compute_vis(np.array([0.05, 0.08, 0.10, 0.20, 1.40, 0.25]))
    with pytest.raises(ValueError):
        compute_vis(np.ones(4))


def test_vis_batched_shape():
    rng = np.random.default_rng(0)
    bands = rng.uniform(0.01, 0.9, size=(7, 3, 6))
    assert compute_vis(bands).shape == (7, 3, 5)


def test_dprvi_values():
    assert dprvi(1.0, 1.0) == pytest.approx(2.0)
    assert dprvi(3.0, 1.0) == pytest.approx(1.0)
    assert dprvi(1.0, 0.0) == pytest.approx(0.0)
    assert np.isnan(dprvi(0.0, 0.0))
    with pytest.raises(ValueError):
        dprvi(-0.1, 0.2)


def test_dprvi_bounded():
    rng = np.random.default_rng(1)
    vv = rng.uniform(0, 2, 500)
    vh = rng.uniform(0, 2, 500)
    out = dprvi(vv, vh)
    assert np.all((out >= 0) & (out <= 4))


def test_db_round_trip():
    x = np.array([1e-4, 0.03, 1.0, 250.0])
    assert np.allclose(from_db(to_db(x)), x, rtol=1e-12)
    assert to_db(100.0) == pytest.approx(20.0)
    assert np.isnan(to_db(0.0)) and np.isnan(to_db(-3.0))


# --------------------------------------------------------------------- PCA


def _oracle_eigh(x):
    """Explained-variance ratios via the covariance eigendecomposition."""
    c = x - x.mean(axis=0)
    evals, evecs = np.linalg.eigh(c.T @ c)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    return evals / evals.sum(), evecs[:, order].T


def test_pca_matches_eigendecomposition():
    rng = np.random.default_rng(2)
    # anisotropic data so the spectrum is well separated
    x = rng.normal(size=(300, 5)) * np.array([5.0, 3.0, 1.5, 0.7, 0.2])
    model = pca_fit(x, variance_target=0.999999, max_components=5)
    ratios, vecs = _oracle_eigh(x)
    assert np.allclose(model.explained_variance_ratio, ratios[: model.n_components], atol=1e-10)
    for i in range(model.n_components):  # rows match up to sign
        assert abs(model.components[i] @ vecs[i]) == pytest.approx(1.0, abs=1e-8)


def test_pca_component_count_tracks_variance_target():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 6)) * np.array([10.0, 5.0, 2.0, 1.0, 0.5, 0.1])
    cheap = pca_fit(x, variance_target=0.80, max_components=6)
    rich = pca_fit(x, variance_target=0.999, max_components=6)
    assert cheap.n_components < rich.n_components
    cum = np.cumsum(rich.explained_variance_ratio)
    assert cum[rich.n_components - 1] > 0.999
    if rich.n_components > 1:
        assert cum[rich.n_components - 2] <= 0.999


def test_pca_components_orthonormal_and_reconstruction():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 4))
    model = pca_fit(x, variance_target=1.0, max_components=4)
    eye = model.components @ model.components.T
    assert np.allclose(eye, np.eye(model.n_components), atol=1e-10)
    scores = pca_transform(model, x, width=model.n_components)
    recon = scores @ model.components + model.mean
    assert np.allclose(recon, x, atol=1e-10)


def test_pca_transform_pads_and_truncates():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(60, 2))
    x = base @ rng.normal(size=(2, 7))  # rank 2 in 7-d
    model = pca_fit(x, variance_target=0.99, max_components=18)
    assert model.n_components <= 2
    scores = pca_transform(model, x[0], width=18)
    assert scores.shape == (18,)
    assert np.all(scores[model.n_components :] == 0.0)
    assert pca_transform(model, x, width=1).shape == (60, 1)


def test_pca_mean_maps_to_zero_scores():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 3))
    model = pca_fit(x)
    assert np.allclose(pca_transform(model, model.mean), 0.0, atol=1e-12)


def test_pca_rejects_bad_input():
    with pytest.raises(ValueError):
        pca_fit(np.ones((1, 3)))
    with pytest.raises(ValueError):
        pca_fit(np.array([[1.0, np.nan], [2.0, 3.0]]))
    with pytest.raises(ValueError):
        pca_fit(np.ones((10, 3)))  # no variance
    model = pca_fit(np.random.default_rng(7).normal(size=(20, 4)))
    with pytest.raises(ValueError):
        pca_transform(model, np.zeros(5))


# ----------------------------------------------------------- interpolation


def test_interpolate_fills_interior_linearly():
    y = np.array([1.0, np.nan, np.nan, 4.0])
    assert np.allclose(interpolate_gaps(y), [1.0, 2.0, 3.0, 4.0])


def test_interpolate_extends_edges():
    y = np.array([np.nan, np.nan, 5.0, 7.0, np.nan])
    assert np.allclose(interpolate_gaps(y), [5.0, 5.0, 5.0, 7.0, 7.0])


def test_interpolate_preserves_observed_and_is_idempotent():
    rng = np.random.default_rng(8)
    y = rng.normal(size=200)
    y[rng.random(200) < 0.3] = np.nan
    out = interpolate_gaps(y)
    obs = np.isfinite(y)
    assert np.array_equal(out[obs], y[obs])
    assert np.all(np.isfinite(out))
    assert np.array_equal(interpolate_gaps(out), out)


def test_interpolate_all_missing_raises():
    with pytest.raises(ValueError):
        interpolate_gaps(np.full(10, np.nan))


# ------------------------------------------------------------------ LOWESS


def _lowess_reference(y, frac, iterations):
    """Per-point weighted least squares, solved independently via lstsq."""
    n = y.size
    x = np.arange(n, dtype=float)
    span = int(np.ceil(frac * n))
    robust = np.ones(n)
    fitted = y.copy()
    for _ in range(iterations + 1):
        fitted = np.empty(n)
        for i in range(n):
            lo = min(max(i - span // 2, 0), n - span)
            nb = slice(lo, lo + span)
            d = np.abs(x[nb] - x[i])
            dmax = d.max() if d.max() > 0 else 1.0
            w = (1 - np.minimum(d / dmax, 1) ** 3) ** 3 * robust[nb]
            design = np.stack([np.ones(span), x[nb]], axis=1)
            sq = np.sqrt(w)[:, None]
            coef, *_ = np.linalg.lstsq(design * sq, y[nb] * sq[:, 0], rcond=None)
            fitted[i] = coef[0] + coef[1] * x[i]
        resid = y - fitted
        s = np.median(np.abs(resid))
        if s <= 0:
            break
        u = np.clip(resid / (6 * s), -1.0, 1.0)
        robust = (1 - u**2) ** 2
    return fitted


def _noisy_season(n, seed):
    rng = np.random.default_rng(seed)
    x = np.arange(n)
    y = 8 * np.sin(2 * np.pi * x / 365) + 3 + rng.normal(0, 0.6, n)
    y[n // 6] += 9  # outliers the robustness pass should shrug off
    y[n // 2] -= 7
    return y


def test_lowess_matches_statsmodels():
    y = _noisy_season(256, seed=9)
    frac = 20 / 256  # frac*n exactly integral, so both pick the same span
    mine = lowess_smooth(y, frac=frac, iterations=2)
    ref = sm_lowess(y, np.arange(256.0), frac=frac, it=2)[:, 1]
    assert np.allclose(mine, ref, rtol=1e-9, atol=1e-9)


def test_lowess_matches_bruteforce_wls():
    y = _noisy_season(120, seed=10)
    mine = lowess_smooth(y, frac=0.2, iterations=2)
    ref = _lowess_reference(y, frac=0.2, iterations=2)
    assert np.allclose(mine, ref, rtol=1e-9, atol=1e-9)


def test_lowess_recovers_line_exactly():
    y = 0.5 * np.arange(100) - 3.0
    assert np.allclose(lowess_smooth(y, frac=0.3), y, atol=1e-9)


def test_lowess_resists_outliers():
    n = 365
    clean = 8 * np.sin(2 * np.pi * np.arange(n) / 365) + 3
    y = clean.copy()
    y[100] += 50.0
    smoothed = lowess_smooth(y, frac=0.08, iterations=2)
    assert abs(smoothed[100] - clean[100]) < 0.5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50), scale=st.floats(0.1, 20))
def test_lowess_affine_equivariance(seed, shift, scale):
    y = _noisy_season(90, seed)
    base = lowess_smooth(y, frac=0.25)
    moved = lowess_smooth(scale * y + shift, frac=0.25)
    assert np.allclose(moved, scale * base + shift, rtol=1e-8, atol=1e-6)


def test_lowess_rejects_degenerate_input():
    with pytest.raises(ValueError):
        lowess_smooth(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        lowess_smooth(np.arange(10.0), frac=0.01)  # neighbourhood below 3 points
    with pytest.raises(ValueError):
        lowess_smooth(np.append(np.ones(50), np.nan))


# ---------------------------------------------------------------- anomalies


def _dates(start: str, days: int) -> np.ndarray:
    return np.datetime64(start, "D") + np.arange(days)


def test_anomalies_of_pure_cycle_are_zero():
    dates = _dates("2017-01-01", 730)  # two non-leap years align day-for-day
    doy = (dates - dates.astype("datetime64[Y]")).astype(int)
    gpp = np.cos(2 * np.pi * doy / 365.0) * 5 + 10
    anom = seasonal_anomalies(gpp, dates)
    assert np.max(np.abs(anom)) < 1e-9


def test_anomalies_cross_year_mean():
    dates = _dates("2017-01-01", 730)
    gpp = np.zeros(730)
    gpp[:365] = 2.0  # first year
    gpp[365:] = 6.0  # second year; cycle mean is 4 every day
    anom = seasonal_anomalies(gpp, dates)
    assert np.allclose(anom[:365], -2.0)
    assert np.allclose(anom[365:], 2.0)


def test_anomalies_leap_day_merges_into_feb_28():
    dates = _dates("2015-01-01", 365 * 2 + 366)  # 2015, 2016 (leap), 2017
    gpp = np.ones(dates.size)
    feb29 = int(np.flatnonzero(dates == np.datetime64("2016-02-29"))[0])
    gpp[feb29] = 25.0
    anom = seasonal_anomalies(gpp, dates)
    # Feb 29 shares its bucket with the three Feb 28 observations
    mean = (25.0 + 1.0 + 1.0 + 1.0) / 4
    assert anom[feb29] == pytest.approx(25.0 - mean)
    assert anom[feb29 - 1] == pytest.approx(1.0 - mean)
    # March days are back in their own buckets
    assert anom[feb29 + 1] == pytest.approx(0.0)


def test_anomalies_nan_propagates_but_cycle_survives():
    dates = _dates("2015-01-01", 730)
    gpp = np.full(730, 3.0)
    gpp[10] = np.nan  # year-1 value missing; year-2 day 10 still defines the cycle
    anom = seasonal_anomalies(gpp, dates)
    assert np.isnan(anom[10])
    assert anom[375] == pytest.approx(0.0)


def test_anomalies_error_paths():
    dates = _dates("2015-01-01", 200)
    with pytest.raises(ValueError, match="2 years"):
        seasonal_anomalies(np.ones(200), dates)
    dates = _dates("2015-01-01", 730)
    gpp = np.ones(730)
    gpp[50] = np.nan
    gpp[415] = np.nan  # same day-of-year missing in both years
    with pytest.raises(ValueError, match="no observations"):
        seasonal_anomalies(gpp, dates)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-100, 100))
def test_anomalies_shift_invariant(seed, shift):
    dates = _dates("2015-01-01", 730)
    gpp = np.random.default_rng(seed).normal(10, 3, 730)
    assert np.allclose(
        seasonal_anomalies(gpp + shift, dates), seasonal_anomalies(gpp, dates), atol=1e-9
    )


# ------------------------------------------------------------------- flags


def test_candidates_match_quantile_oracle():
    rng = np.random.default_rng(11)
    anom = rng.normal(0, 2, 1000)
    neg, pos = extreme_candidates(anom)
    lo, hi = np.percentile(anom, [10, 90])  # same type-7 estimator, other entry point
    assert np.array_equal(neg, anom < lo)
    assert np.array_equal(pos, anom > hi)
    assert not np.any(neg & pos)


def test_candidates_strict_inequality_at_threshold():
    anom = np.arange(10.0)  # 10% quantile is 0.9, 90% is 8.1
    neg, pos = extreme_candidates(anom)
    assert np.flatnonzero(neg).tolist() == [0]
    assert np.flatnonzero(pos).tolist() == [9]


def test_flags_keep_only_long_runs():
    # planted tails must stay under 10% of the record or the strict-inequality
    # quantile threshold lands inside the planted block itself
    anom = np.random.default_rng(13).normal(0, 1, 200)
    anom[5:9] = -10.0  # 4-day run: dropped
    anom[20:25] = -10.0  # 5-day run: kept
    anom[40:47] = 10.0  # 7-day run: kept
    flags = flag_extremes(anom, min_run=5)
    assert not flags.extreme_neg[5:9].any()
    assert flags.extreme_neg[20:25].all()
    assert flags.extreme_pos[40:47].all()
    assert flags.extreme_neg.sum() == 5 and flags.extreme_pos.sum() == 7


def test_flags_run_at_series_edge():
    anom = np.random.default_rng(14).normal(0, 1, 100)
    anom[95:] = -10.0  # run touching the end
    flags = flag_extremes(anom, min_run=5)
    assert flags.extreme_neg[95:].all()


def test_flags_nan_days_never_flagged():
    anom = np.concatenate([np.full(6, -10.0), np.full(6, np.nan), np.random.default_rng(12).normal(size=50)])
    flags = flag_extremes(anom, min_run=5)
    assert not flags.extreme_neg[6:12].any() and not flags.extreme_pos[6:12].any()


def test_growing_season_months():
    dates = _dates("2019-01-01", 365)
    mask = growing_season_mask(dates)
    months = dates.astype("datetime64[M]").astype(int) % 12 + 1
    assert np.array_equal(mask, (months >= 5) & (months <= 9))
    assert mask.sum() == 31 + 30 + 31 + 31 + 30  # May..Sep


def test_flags_fill_growing_season_only_with_dates():
    anom = np.zeros(365)
    flags = flag_extremes(anom)
    assert not flags.growing.any()
    flags = flag_extremes(anom, dates=_dates("2019-01-01", 365))
    assert flags.growing.any()


def test_condition_flags_reject_contradiction():
    good = np.array([True, False])
    with pytest.raises(ValueError):
        ConditionFlags(extreme_neg=good, extreme_pos=good.copy())

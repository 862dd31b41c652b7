"""Site records, the synthetic flux-site generator, context windows, and the
temporal train/validation/test split.

A site record is a contiguous daily table: observed GPP (with quality flags)
plus a 28-wide feature token per day.  Token layout, fixed across the whole
pipeline:

    [0, 18)   s2_pc01..s2_pc18   PCA scores of Sentinel-2 vegetation indices
    [18, 23)  s1_f1..s1_f5       Sentinel-1 radar features (DpRVI + dB powers)
    [23, 27)  lst_f1..lst_f4     land-surface-temperature features
    [27, 28)  rso                daily-mean clear-sky irradiance, W/m^2

Models consume overlapping 120-day context windows whose last row is the
target day itself.
"""

from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import (
    ConditionFlags,
    compute_vis,
    dprvi,
    flag_extremes,
    growing_season_mask,
    interpolate_gaps,
    lowess_smooth,
    pca_fit,
    pca_transform,
    seasonal_anomalies,
    to_db,
)
from .solar import GeoLocation, rso_daily

__all__ = [
    "K_DEFAULT",
    "N_TOKEN",
    "MODALITY_SLICES",
    "TOKEN_COLUMNS",
    "CSV_HEADER",
    "DataError",
    "SiteSeries",
    "WindowSample",
    "SampleSet",
    "SplitSpec",
    "SiteNorm",
    "SynthConfig",
    "SynthTruth",
    "load_sites",
    "write_site_csv",
    "prepare_site",
    "synth_generate",
    "synth_write",
    "make_windows",
    "split",
    "fit_norms",
    "apply_norms",
    "denormalize_predictions",
]

K_DEFAULT = 120
N_TOKEN = 28

MODALITY_SLICES = {
    "s2": slice(0, 18),
    "s1": slice(18, 23),
    "lst": slice(23, 27),
    "rso": slice(27, 28),
}

TOKEN_COLUMNS = (
    tuple(f"s2_pc{i:02d}" for i in range(1, 19))
    + tuple(f"s1_f{i}" for i in range(1, 6))
    + tuple(f"lst_f{i}" for i in range(1, 5))
    + ("rso",)
)

CSV_HEADER = ("date", "gpp", "gpp_qc") + TOKEN_COLUMNS

# named RNG substream tags; every stream key is [seed, TAG, ...context ints]
STREAM_SYNTH = 11


class DataError(ValueError):
    """Schema or content problem in input data."""


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class SiteSeries:
    """One site's daily record after preparation.

    ``gpp`` is NaN on missing or low-quality days; ``tokens`` is complete
    (gaps interpolated).  ``dates`` must be strictly consecutive days.
    """

    site_id: str
    dates: np.ndarray  # (n,) datetime64[D]
    tokens: np.ndarray  # (n, 28)
    gpp: np.ndarray  # (n,)
    gpp_smoothed: np.ndarray  # (n,)
    flags: ConditionFlags

    def __post_init__(self):
        n = self.dates.shape[0]
        if self.tokens.shape != (n, N_TOKEN):
            raise DataError(
                f"site {self.site_id}: tokens must be ({n}, {N_TOKEN}), got {self.tokens.shape}"
            )
        if self.gpp.shape != (n,) or self.gpp_smoothed.shape != (n,):
            raise DataError(f"site {self.site_id}: gpp arrays must be length {n}")
        steps = np.diff(self.dates).astype("timedelta64[D]").astype(int)
        if np.any(steps != 1):
            i = int(np.argmax(steps != 1))
            raise DataError(
                f"site {self.site_id}: non-contiguous dates, {self.dates[i]} "
                f"followed by {self.dates[i + 1]}"
            )
        if not np.all(np.isfinite(self.tokens)):
            raise DataError(f"site {self.site_id}: tokens contain missing values")

    def __len__(self) -> int:
        return self.dates.shape[0]

    @property
    def years(self) -> np.ndarray:
        return self.dates.astype("datetime64[Y]").astype(int) + 1970


@dataclass(frozen=True)
class WindowSample:
    site_id: str
    target_date: np.datetime64
    context: np.ndarray  # (k, 28), rows oldest -> newest; last row = target day
    target: float
    target_smoothed: float


@dataclass
class SampleSet:
    """Column-oriented batch of window samples (cheaper than sample lists)."""

    site_ids: np.ndarray  # (n,) str
    target_dates: np.ndarray  # (n,) datetime64[D]
    contexts: np.ndarray  # (n, k, 28)
    targets: np.ndarray  # (n,)
    targets_smoothed: np.ndarray  # (n,)

    def __post_init__(self):
        n = len(self.targets)
        if not (
            len(self.site_ids) == len(self.target_dates) == len(self.targets_smoothed) == n
            and self.contexts.shape[:1] == (n,)
        ):
            raise DataError("sample columns disagree on length")
        if n and self.contexts.shape[2] != N_TOKEN:
            raise DataError(f"context width must be {N_TOKEN}")

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(
            site_id=str(self.site_ids[i]),
            target_date=self.target_dates[i],
            context=self.contexts[i],
            target=float(self.targets[i]),
            target_smoothed=float(self.targets_smoothed[i]),
        )

    def select(self, index) -> "SampleSet":
        return SampleSet(
            site_ids=self.site_ids[index],
            target_dates=self.target_dates[index],
            contexts=self.contexts[index],
            targets=self.targets[index],
            targets_smoothed=self.targets_smoothed[index],
        )

    @property
    def target_years(self) -> np.ndarray:
        return self.target_dates.astype("datetime64[Y]").astype(int) + 1970

    @staticmethod
    def concat(parts: list["SampleSet"]) -> "SampleSet":
        if not parts:
            raise DataError("nothing to concatenate")
        return SampleSet(
            site_ids=np.concatenate([p.site_ids for p in parts]),
            target_dates=np.concatenate([p.target_dates for p in parts]),
            contexts=np.concatenate([p.contexts for p in parts]),
            targets=np.concatenate([p.targets for p in parts]),
            targets_smoothed=np.concatenate([p.targets_smoothed for p in parts]),
        )


@dataclass(frozen=True)
class SplitSpec:
    """Temporal split by target-date year.  Context rows may reach back
    across the boundary; only the target day decides membership."""

    train_years: frozenset[int]
    validation_years: frozenset[int]
    test_years: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "train_years", frozenset(self.train_years))
        object.__setattr__(self, "validation_years", frozenset(self.validation_years))
        object.__setattr__(self, "test_years", frozenset(self.test_years))
        a, b, c = self.train_years, self.validation_years, self.test_years
        if a & b or a & c or b & c:
            raise DataError("split year sets must be pairwise disjoint")
        if not a:
            raise DataError("train years must be non-empty")


DEFAULT_SPLIT = SplitSpec(
    train_years=frozenset({2016, 2017, 2018}),
    test_years=frozenset({2019}),
    validation_years=frozenset({2020}),
)


# ----------------------------------------------------------------- loading


def _parse_float(text: str, where: str) -> float:
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None


def _read_site_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(header) != CSV_HEADER:
            raise DataError(
                f"{path}: bad header; expected {','.join(CSV_HEADER[:4])},... "
                f"({len(CSV_HEADER)} columns), got {len(header)} columns"
            )
        dates, gpp, qc, tokens = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{where}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                day = _dt.date.fromisoformat(row[0])
            except ValueError:
                raise DataError(f"{where}: malformed date {row[0]!r}") from None
            dates.append(np.datetime64(day, "D"))
            gpp.append(_parse_float(row[1], where))
            if row[2] not in ("0", "1"):
                raise DataError(f"{where}: gpp_qc must be 0 or 1, got {row[2]!r}")
            qc.append(int(row[2]))
            tokens.append([_parse_float(v, where) for v in row[3:]])
    if not dates:
        raise DataError(f"{path}: no data rows")
    return (
        np.array(dates, dtype="datetime64[D]"),
        np.array(gpp),
        np.array(qc),
        np.array(tokens),
    )


def prepare_site(site_id: str, dates, gpp, qc, tokens) -> SiteSeries:
    """Validate a raw table and derive the modeling record.

    Low-quality targets become NaN, token gaps are linearly interpolated,
    GPP is LOWESS-smoothed for the training objective, and extreme-event
    flags are computed from day-of-year anomalies.  Records shorter than two
    calendar years get empty extreme masks (no climatology to deviate from).
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    gpp = np.asarray(gpp, dtype=np.float64)
    qc = np.asarray(qc)
    tokens = np.asarray(tokens, dtype=np.float64)
    steps = np.diff(dates).astype("timedelta64[D]").astype(int)
    if np.any(steps != 1):
        i = int(np.argmax(steps != 1))
        raise DataError(
            f"site {site_id}: non-contiguous dates, {dates[i]} followed by {dates[i + 1]}"
        )
    if tokens.ndim != 2 or tokens.shape[1] != N_TOKEN:
        raise DataError(
            f"site {site_id}: expected {N_TOKEN} feature columns, got "
            f"{tokens.shape[1] if tokens.ndim == 2 else 'non-tabular input'}"
        )
    gpp = np.where(qc == 1, gpp, np.nan)
    filled = tokens.copy()
    for j in range(N_TOKEN):
        col = filled[:, j]
        if not np.all(np.isfinite(col)):
            try:
                filled[:, j] = interpolate_gaps(col)
            except ValueError:
                raise DataError(
                    f"site {site_id}: column {TOKEN_COLUMNS[j]} has no observations"
                ) from None
    if not np.any(np.isfinite(gpp)):
        raise DataError(f"site {site_id}: no usable GPP observations")
    gpp_filled = interpolate_gaps(gpp)
    smoothed = lowess_smooth(gpp_filled)
    n_years = len(np.unique(dates.astype("datetime64[Y]")))
    if n_years >= 2:
        # anomalies on the gap-filled series: a day missing in every year
        # would otherwise leave a hole in the climatology
        flags = flag_extremes(seasonal_anomalies(gpp_filled, dates), dates=dates)
    else:
        empty = np.zeros(len(dates), dtype=bool)
        flags = ConditionFlags(
            extreme_neg=empty, extreme_pos=empty.copy(), growing=growing_season_mask(dates)
        )
    return SiteSeries(
        site_id=site_id,
        dates=dates,
        tokens=filled,
        gpp=gpp,
        gpp_smoothed=smoothed,
        flags=flags,
    )


def load_sites(path) -> list[SiteSeries]:
    """Load every ``<site_id>.csv`` under ``path`` into prepared SiteSeries."""
    root = Path(path)
    files = sorted(root.glob("*.csv"))
    if not files:
        raise DataError(f"{root}: no site CSV files found")
    sites = []
    for fp in files:
        dates, gpp, qc, tokens = _read_site_csv(fp)
        sites.append(prepare_site(fp.stem, dates, gpp, qc, tokens))
    return sites


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_site_csv(directory, site_id: str, dates, gpp, qc, tokens) -> Path:
    """Write one site table in the documented schema; floats round-trip exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / f"{site_id}.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(len(dates)):
            writer.writerow(
                [str(dates[i]), _fmt(gpp[i]), str(int(qc[i]))] + [_fmt(v) for v in tokens[i]]
            )
    return out


# ----------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic flux-site generator.

    GPP is built as  amp * mix(t) * season(t) * stress(t) * (1 + noise*eps)
    where mix(t) = (1 - w_rso) + w_rso * rso(t - lag_days)/mean(rso): the
    radiation factor is the only term carrying a planted time lag.  The rso
    column is clear-sky irradiance scaled by a slowly varying stochastic cloud
    transmittance (``cloudiness``), so the lagged value cannot be recovered
    from calendar position alone and genuinely has to be read off the window
    row ``lag_days`` back.  Season drives the S2 reflectances (with
    year-specific onset jitter S2 alone can reveal), stress drives the LST
    features, and S1 is uncorrelated noise unless ``s1_season_coupling`` is
    raised above zero.
    """

    n_sites: int = 3
    years: tuple[int, ...] = (2016, 2017)
    latitudes: tuple[float, ...] | None = None
    lag_days: int = 30
    w_rso: float = 0.8
    cloudiness: float = 0.7
    stress_strength: float = 0.6
    lst_stress_coupling: float = 1.5
    s1_season_coupling: float = 0.0
    noise: float = 0.05
    amplitude: float = 12.0
    spinup_days: int = 150
    qc_bad_frac: float = 0.02
    missing_frac: float = 0.01

    def __post_init__(self):
        if self.n_sites < 1:
            raise DataError("n_sites must be >= 1")
        if not self.years:
            raise DataError("years must be non-empty")
        ys = tuple(int(y) for y in self.years)
        if any(b - a != 1 for a, b in zip(ys, ys[1:])):
            raise DataError("years must be consecutive")
        object.__setattr__(self, "years", ys)
        if self.latitudes is not None:
            object.__setattr__(self, "latitudes", tuple(float(v) for v in self.latitudes))
        if self.latitudes is not None and len(self.latitudes) != self.n_sites:
            raise DataError("latitudes must match n_sites")
        if not 0.0 <= self.w_rso <= 1.0:
            raise DataError("w_rso must lie in [0, 1]")
        if not 0.0 <= self.cloudiness < 1.0:
            raise DataError("cloudiness must lie in [0, 1)")
        if self.lag_days < 0 or self.noise < 0 or self.spinup_days < 0:
            raise DataError("lag_days, noise, spinup_days must be non-negative")
        if not (0.0 <= self.qc_bad_frac < 1.0 and 0.0 <= self.missing_frac < 1.0):
            raise DataError("qc_bad_frac and missing_frac must lie in [0, 1)")


@dataclass(frozen=True)
class SynthTruth:
    """Generator internals exposed for oracle tests: the clean target and its
    factors, aligned with the site's dates."""

    site_id: str
    amplitude: float
    season: np.ndarray
    stress_factor: np.ndarray
    radiation_mix: np.ndarray  # (1-w) + w * rso(t-lag)/mean(rso)
    clean_gpp: np.ndarray


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gaussian_kernel(half: int = 8, scale: float = 4.0) -> np.ndarray:
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / scale) ** 2)
    return k / k.sum()


def _ar1(rng: np.random.Generator, n: int, rho: float) -> np.ndarray:
    """Unit-variance stationary AR(1) series."""
    eps = rng.standard_normal(n)
    z = np.empty(n)
    z[0] = eps[0]
    s = np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        z[t] = rho * z[t - 1] + s * eps[t]
    return z


_LAG_KERNEL = _gaussian_kernel()


def _synth_site(config: SynthConfig, seed: int, index: int):
    rng = np.random.default_rng([seed, STREAM_SYNTH, index])
    if config.latitudes is not None:
        lat = float(config.latitudes[index])
    else:
        lat = 40.0 + 16.0 * index / max(config.n_sites - 1, 1)
    loc = GeoLocation(latitude=lat, longitude=5.0 + 3.0 * index, elevation=120.0 + 60.0 * index)

    first = np.datetime64(f"{config.years[0]}-01-01", "D") - config.spinup_days
    last = np.datetime64(f"{config.years[-1]}-12-31", "D")
    dates = np.arange(first, last + 1)
    n = len(dates)
    doy = (dates - dates.astype("datetime64[Y]")).astype(int) + 1
    cal_years = dates.astype("datetime64[Y]").astype(int) + 1970

    # all-sky irradiance, extended back so the lagged driver exists on day 0
    # (and forward when the kernel half-width exceeds the lag)
    half = _LAG_KERNEL.size // 2
    ext = config.lag_days + half
    fwd = max(0, half - config.lag_days)
    dates_ext = np.arange(first - ext, last + 1 + fwd)
    rso_ext = rso_daily(loc, dates_ext)
    if config.cloudiness > 0.0:
        # AR(1) cloud transmittance: correlated over ~two weeks, independent
        # of the calendar, so rso(t-lag) is not a function of day-of-year
        cz = _ar1(rng, len(dates_ext), rho=0.92)
        rso_ext = rso_ext * (1.0 - config.cloudiness * _sigmoid(cz))
    rso_col = rso_ext[ext : ext + n]
    # soil-water buffering: the radiation driver is a ~week-wide kernel
    # average centred lag_days back, not a single day's value
    rso_lagged = np.convolve(rso_ext, _LAG_KERNEL, mode="valid")[:n]
    mix = (1.0 - config.w_rso) + config.w_rso * rso_lagged / rso_col.mean()

    # season: logistic green-up/senescence with year-specific onset jitter,
    # observable only through the S2 reflectances
    season = np.zeros(n)
    onsets = {}
    for y in np.unique(cal_years):
        yr = rng.random(2)
        onsets[y] = (112.0 + 12.0 * yr[0], 262.0 + 12.0 * yr[1])
    for y, (onset, end) in onsets.items():
        m = cal_years == y
        green = _sigmoid((doy[m] - onset) / 12.0) * _sigmoid((end - doy[m]) / 18.0)
        # evergreen floor: photosynthesis never fully stops, so the radiation
        # pathway stays active (and learnable) outside the growing season
        season[m] = 0.5 + 0.5 * green

    # stress: a weak slow AR(1) wiggle plus planted droughts whose log-space
    # depth dwarfs the AR range, so every simulated year is guaranteed a
    # >=5-day run below the global anomaly decile
    z = _ar1(rng, n, rho=0.95)
    drought = np.zeros(n)
    for iy, y in enumerate(config.years):
        onset, end = onsets[y]
        # primary event staggered by year parity so consecutive years never
        # depress the same climatology days; secondary and tertiary anywhere
        primary_lo, primary_hi = (162, 175) if iy % 2 == 0 else (190, 203)
        events = [
            (int(rng.integers(primary_lo, primary_hi)), int(rng.integers(12, 17)), 1.5),
            (int(rng.integers(int(onset) + 25, int(end) - 45)), int(rng.integers(8, 15)), 0.55),
            (int(rng.integers(int(onset) - 10, int(end) - 20)), int(rng.integers(6, 11)), 0.9),
        ]
        for start, dur, depth in events:
            m = (cal_years == y) & (doy >= start) & (doy < start + dur)
            drought[m] += depth * np.sin(np.pi * (doy[m] - start + 0.5) / dur) ** 2
    log_stress = config.stress_strength * (0.2 * z - drought)
    stress = np.exp(log_stress)
    stress_signal = z - drought / 0.2  # the series LST features observe

    amp = config.amplitude * (0.85 + 0.3 * rng.random())
    clean = amp * mix * season * stress
    gpp = clean * (1.0 + config.noise * rng.standard_normal(n))

    # S2 block: reflectances follow observed greenness; per-site PCA of the
    # derived vegetation indices gives the 18 score columns (zero-padded)
    # greenness as S2 sees it: iid retrieval noise plus a slowly drifting
    # bias (atmospheric-correction/BRDF artifacts persist for weeks), so the
    # absolute greenness level is unreliable however much one averages; the
    # sharp green-up/senescence transitions (and their year-to-year jitter)
    # remain clearly visible because the bias drifts far slower than they rise
    g_obs = season + 4.0 * config.noise * _ar1(rng, n, rho=0.97)
    g_obs = np.clip(g_obs + 0.8 * config.noise * rng.standard_normal(n), 0.0, 1.0)
    base = np.array([0.06, 0.09, 0.28, 0.18, 0.16, 0.26])
    slope = np.array([-0.03, 0.03, -0.22, 0.08, 0.34, -0.12])
    bands = base + slope * g_obs[:, None]
    bands = np.clip(bands + 0.01 * config.noise * rng.standard_normal((n, 6)), 0.0, 1.0)
    vis = compute_vis(bands)
    scores = pca_transform(pca_fit(vis), vis)

    # LST block: thermal-anomaly features tracking the water-stress signal
    # (droughts show up as heat spikes, so the sign is flipped); the seasonal
    # cycle is deliberately absent so LST's information content is stress alone
    c = config.lst_stress_coupling
    lst = np.stack(
        [
            -c * stress_signal + 4.0 * config.noise * rng.standard_normal(n),
            6.0 - 0.7 * c * stress_signal + 4.0 * config.noise * rng.standard_normal(n),
            -c * stress_signal + 4.0 * config.noise * rng.standard_normal(n),
            -2.0 - 0.5 * c * stress_signal + 4.0 * config.noise * rng.standard_normal(n),
        ],
        axis=1,
    )

    # S1 block: lognormal backscatter, by default carrying no signal at all
    vv = 0.09 * np.exp(0.3 * rng.standard_normal(n))
    vh = 0.03 * np.exp(0.3 * rng.standard_normal(n)) * (1.0 + config.s1_season_coupling * season)
    s1 = np.stack(
        [dprvi(vv, vh), to_db(vv), to_db(vh), to_db(vv) - to_db(vh), to_db(vv + vh)],
        axis=1,
    )

    tokens = np.concatenate([scores, s1, lst, rso_col[:, None]], axis=1)

    qc = np.ones(n, dtype=int)
    qc[rng.random(n) < config.qc_bad_frac] = 0
    missing = rng.random(n) < config.missing_frac
    gpp[missing] = np.nan
    qc[missing] = 0

    truth = SynthTruth(
        site_id=f"SYN{index:02d}",
        amplitude=amp,
        season=season,
        stress_factor=stress,
        radiation_mix=mix,
        clean_gpp=clean,
    )
    return truth.site_id, dates, gpp, qc, tokens, truth


def synth_generate(config: SynthConfig, seed: int, with_truth: bool = False):
    """Deterministic synthetic sites; same (config, seed) -> identical output."""
    sites, truths = [], []
    for i in range(config.n_sites):
        site_id, dates, gpp, qc, tokens, truth = _synth_site(config, seed, i)
        sites.append(prepare_site(site_id, dates, gpp, qc, tokens))
        truths.append(truth)
    return (sites, truths) if with_truth else sites


def synth_write(config: SynthConfig, seed: int, out_dir) -> list[Path]:
    """Generate and write site CSVs; loading them back reproduces
    synth_generate bitwise (floats are written in shortest round-trip form)."""
    paths = []
    for i in range(config.n_sites):
        site_id, dates, gpp, qc, tokens, _ = _synth_site(config, seed, i)
        paths.append(write_site_csv(out_dir, site_id, dates, gpp, qc, tokens))
    return paths


# ----------------------------------------------------------------- windows


def make_windows(series: SiteSeries, k: int = K_DEFAULT) -> SampleSet:
    """All k-day context windows with an observed target on the final day."""
    n = len(series)
    if k < 1:
        raise DataError("window length must be >= 1")
    if n < k:
        raise DataError(f"site {series.site_id}: {n} days < window length {k}")
    targets = series.gpp[k - 1 :]
    valid = np.isfinite(targets)
    contexts = sliding_window_view(series.tokens, k, axis=0).transpose(0, 2, 1)
    return SampleSet(
        site_ids=np.full(int(valid.sum()), series.site_id, dtype=object),
        target_dates=series.dates[k - 1 :][valid],
        contexts=np.ascontiguousarray(contexts[valid]),
        targets=targets[valid],
        targets_smoothed=series.gpp_smoothed[k - 1 :][valid],
    )


def split(samples: SampleSet, spec: SplitSpec = DEFAULT_SPLIT):
    """Partition samples by target year into (train, validation, test)."""
    years = samples.target_years
    covered = spec.train_years | spec.validation_years | spec.test_years
    stray = sorted(set(years.tolist()) - covered)
    if stray:
        raise DataError(f"target years {stray} not covered by the split spec")
    in_set = lambda ys: np.isin(years, sorted(ys))  # noqa: E731
    return (
        samples.select(in_set(spec.train_years)),
        samples.select(in_set(spec.validation_years)),
        samples.select(in_set(spec.test_years)),
    )


# ----------------------------------------------------------- normalization


@dataclass(frozen=True)
class SiteNorm:
    token_mean: np.ndarray  # (28,)
    token_std: np.ndarray  # (28,), zero-variance columns clamped to 1
    gpp_mean: float
    gpp_std: float


def fit_norms(sites: list[SiteSeries], train_years) -> dict[str, SiteNorm]:
    """Per-site z-score statistics over training-year days only."""
    train_years = set(int(y) for y in train_years)
    norms = {}
    for s in sites:
        rows = np.isin(s.years, sorted(train_years))
        if not rows.any():
            raise DataError(f"site {s.site_id}: no days in training years {sorted(train_years)}")
        tok = s.tokens[rows]
        g = s.gpp[rows]
        g = g[np.isfinite(g)]
        if g.size < 2:
            raise DataError(f"site {s.site_id}: not enough training GPP observations")
        tstd = tok.std(axis=0)
        gstd = float(g.std())
        norms[s.site_id] = SiteNorm(
            token_mean=tok.mean(axis=0),
            token_std=np.where(tstd < 1e-9, 1.0, tstd),
            gpp_mean=float(g.mean()),
            gpp_std=gstd if gstd > 1e-9 else 1.0,
        )
    return norms


def apply_norms(samples: SampleSet, norms: dict[str, SiteNorm]) -> SampleSet:
    """Standardize contexts and targets per site.  Model space is z-scored;
    use denormalize_predictions to get back to physical units."""
    contexts = samples.contexts.copy()
    targets = samples.targets.copy()
    smoothed = samples.targets_smoothed.copy()
    for site_id in np.unique(samples.site_ids):
        if site_id not in norms:
            raise DataError(f"no normalization statistics for site {site_id}")
        nm = norms[site_id]
        m = samples.site_ids == site_id
        contexts[m] = (contexts[m] - nm.token_mean) / nm.token_std
        targets[m] = (targets[m] - nm.gpp_mean) / nm.gpp_std
        smoothed[m] = (smoothed[m] - nm.gpp_mean) / nm.gpp_std
    return SampleSet(
        site_ids=samples.site_ids,
        target_dates=samples.target_dates,
        contexts=contexts,
        targets=targets,
        targets_smoothed=smoothed,
    )


def denormalize_predictions(
    preds: np.ndarray, site_ids: np.ndarray, norms: dict[str, SiteNorm]
) -> np.ndarray:
    out = np.asarray(preds, dtype=np.float64).copy()
    for site_id in np.unique(site_ids):
        nm = norms[site_id]
        m = site_ids == site_id
        out[m] = out[m] * nm.gpp_std + nm.gpp_mean
    return out

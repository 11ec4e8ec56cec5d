"""Consecutive-violation deforestation detection.

A pixel is flagged when, inside some prediction window, C consecutive
clear-date prediction errors of the same sign all exceed the threshold.
Cloudy dates are skipped, not counted: a run is C consecutive entries of
the pixel's clear-date error sequence. Runs may start at any clear date
of the bare prediction year and finish inside the 120-day extension.

Three rule forms are supported: a single band against one threshold, the
NIR/NDVI pair against two thresholds combined with an OR, and a local
Mahalanobis distance of the (NIR, NDVI) error pair against one threshold.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import BAND_ORDER, Band, PixelSeries, SeriesArrays
from .errors import (
    NoModels,
    OutOfRange,
    SingularCovariance,
    WrongWindowLength,
)
from .harmonic import HarmonicModel, predict_many
from .windows import WindowPair

MIN_CONSECUTIVE = 2
MAX_CONSECUTIVE = 6

# 5x5 km squares within a site and 5-day periods within the year; the last
# period (index 72) spans days 361-366.
SQUARE_SIDE = 5
N_SQUARES = 25
N_PERIODS = 73

# Cubes with fewer error pairs than this fall back to coarser pooling.
MIN_CUBE_SAMPLES = 10


def period_of(doy: int) -> int:
    if not 1 <= doy <= 366:
        raise OutOfRange(f"day of year {doy} outside 1..366")
    return min((doy - 1) // 5, N_PERIODS - 1)


def cube_of(col: int, row: int, doy: int) -> tuple[int, int]:
    """(square index, period index) of a pixel-date."""
    if not (0 <= col <= 24 and 0 <= row <= 24):
        raise OutOfRange(f"grid position ({col}, {row}) outside 0..24")
    square = (row // SQUARE_SIDE) * SQUARE_SIDE + (col // SQUARE_SIDE)
    return square, period_of(doy)


def _check_consecutive(consecutive: int) -> None:
    if not MIN_CONSECUTIVE <= consecutive <= MAX_CONSECUTIVE:
        raise OutOfRange(
            f"consecutive count {consecutive} outside "
            f"{MIN_CONSECUTIVE}..{MAX_CONSECUTIVE}"
        )


@dataclass(frozen=True)
class UnivariateRule:
    band: Band
    threshold: float
    consecutive: int

    def __post_init__(self):
        if self.threshold <= 0:
            raise OutOfRange("threshold must be positive")
        _check_consecutive(self.consecutive)


@dataclass(frozen=True)
class MultivariateRule:
    """NIR and NDVI thresholds combined with the lax OR rule."""

    nir_threshold: float
    ndvi_threshold: float
    consecutive: int

    def __post_init__(self):
        if self.nir_threshold <= 0 or self.ndvi_threshold <= 0:
            raise OutOfRange("thresholds must be positive")
        _check_consecutive(self.consecutive)


@dataclass(frozen=True)
class MahalanobisRule:
    threshold: float
    covariances: "CubeCovarianceTable"
    consecutive: int

    def __post_init__(self):
        if self.threshold <= 0:
            raise OutOfRange("threshold must be positive")
        _check_consecutive(self.consecutive)


DetectionRule = Union[UnivariateRule, MultivariateRule, MahalanobisRule]


@dataclass(frozen=True)
class DetectionResult:
    pixel_id: str
    flagged: bool
    first_flag_date: Optional[dt.date] = None
    triggering_band: Optional[Band] = None

    def __post_init__(self):
        if self.flagged != (self.first_flag_date is not None):
            raise OutOfRange("first_flag_date must be present exactly when flagged")


# --- rule primitives -------------------------------------------------------


def univariate_flag(errors: Sequence[float], threshold: float, consecutive: int) -> bool:
    """True iff all C errors exceed threshold with a common sign."""
    if len(errors) != consecutive:
        raise WrongWindowLength(
            f"expected {consecutive} errors, got {len(errors)}"
        )
    return all(e > threshold for e in errors) or all(e < -threshold for e in errors)


def multivariate_score(
    errors_nir: Sequence[float],
    errors_ndvi: Sequence[float],
    nir_threshold: float,
    ndvi_threshold: float,
    consecutive: int,
) -> int:
    """Number of bands (0..2) whose run violates its threshold."""
    return int(univariate_flag(errors_nir, nir_threshold, consecutive)) + int(
        univariate_flag(errors_ndvi, ndvi_threshold, consecutive)
    )


def multivariate_flag(
    errors_nir: Sequence[float],
    errors_ndvi: Sequence[float],
    nir_threshold: float,
    ndvi_threshold: float,
    consecutive: int,
) -> bool:
    return (
        multivariate_score(errors_nir, errors_ndvi, nir_threshold, ndvi_threshold, consecutive)
        > 0
    )


def mahalanobis_index(eps_nir: float, eps_ndvi: float, sigma: np.ndarray) -> float:
    """sqrt(eps' inv(sigma) eps) for a 2x2 covariance matrix."""
    sigma = np.asarray(sigma, dtype=float)
    det = sigma[0, 0] * sigma[1, 1] - sigma[0, 1] * sigma[1, 0]
    if sigma[0, 0] <= 0 or det <= 0:
        raise SingularCovariance("covariance matrix is not positive definite")
    eps = np.array([eps_nir, eps_ndvi])
    solved = np.linalg.solve(sigma, eps)
    return float(np.sqrt(max(0.0, float(eps @ solved))))


# --- cube covariances ------------------------------------------------------


@dataclass(frozen=True)
class PairedErrorRecord:
    """One historical (NIR, NDVI) prediction-error pair."""

    pixel_id: str
    site_id: str
    col: int
    row: int
    date: dt.date
    doy: int
    eps_nir: float
    eps_ndvi: float


@dataclass(frozen=True)
class CovarianceEntry:
    var_nir: float
    cov: float
    var_ndvi: float
    n: int

    def matrix(self) -> np.ndarray:
        """Regularized 2x2 matrix: a tiny ridge keeps it positive definite."""
        trace = self.var_nir + self.var_ndvi
        ridge = 1e-8 * trace / 2.0 if trace > 0 else 1e-12
        return np.array(
            [[self.var_nir + ridge, self.cov], [self.cov, self.var_ndvi + ridge]]
        )


@dataclass(frozen=True)
class CubeCovarianceTable:
    """Sample covariances of (NIR, NDVI) errors pooled by space-time cube.

    Sparse cubes fall back to the site-period pool, then to the site-wide
    pool across all periods.
    """

    cubes: Mapping[tuple[str, int, int], CovarianceEntry]
    site_periods: Mapping[tuple[str, int], CovarianceEntry]
    sites: Mapping[str, CovarianceEntry]
    min_cube_samples: int = MIN_CUBE_SAMPLES

    def matrix_for(self, site_id: str, square: int, period: int) -> np.ndarray:
        entry = self.cubes.get((site_id, square, period))
        if entry is not None and entry.n >= self.min_cube_samples:
            return entry.matrix()
        entry = self.site_periods.get((site_id, period))
        if entry is not None and entry.n >= 2:
            return entry.matrix()
        entry = self.sites.get(site_id)
        if entry is not None and entry.n >= 2:
            return entry.matrix()
        raise SingularCovariance(f"no covariance history for site {site_id!r}")


def _entry_from_pairs(nir: np.ndarray, ndvi: np.ndarray) -> CovarianceEntry:
    n = nir.size
    if n < 2:
        return CovarianceEntry(0.0, 0.0, 0.0, n)
    cov = np.cov(nir, ndvi, ddof=1)
    return CovarianceEntry(float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1]), n)


def estimate_cube_covariances(
    records: Iterable[PairedErrorRecord],
    min_cube_samples: int = MIN_CUBE_SAMPLES,
) -> CubeCovarianceTable:
    """Pool historical error pairs per cube, per site-period, and per site."""
    by_cube: dict[tuple[str, int, int], list[tuple[float, float]]] = {}
    by_site_period: dict[tuple[str, int], list[tuple[float, float]]] = {}
    by_site: dict[str, list[tuple[float, float]]] = {}
    for rec in records:
        square, period = cube_of(rec.col, rec.row, rec.doy)
        pair = (rec.eps_nir, rec.eps_ndvi)
        by_cube.setdefault((rec.site_id, square, period), []).append(pair)
        by_site_period.setdefault((rec.site_id, period), []).append(pair)
        by_site.setdefault(rec.site_id, []).append(pair)

    def build(groups):
        out = {}
        for key, pairs in groups.items():
            arr = np.asarray(pairs)
            out[key] = _entry_from_pairs(arr[:, 0], arr[:, 1])
        return out

    return CubeCovarianceTable(
        cubes=build(by_cube),
        site_periods=build(by_site_period),
        sites=build(by_site),
        min_cube_samples=min_cube_samples,
    )


# --- per-window error extraction -------------------------------------------


@dataclass
class WindowErrors:
    """Clear-date prediction errors of one pixel inside one window."""

    window_index: int
    dates: list[dt.date]                   # nominal dates
    composite_dates: list[dt.date]         # actual composite-day dates
    doys: np.ndarray
    start_ok: np.ndarray                   # run may start here (bare year)
    errors: dict[Band, np.ndarray] = field(default_factory=dict)


def rule_bands(rule: DetectionRule) -> tuple[Band, ...]:
    if isinstance(rule, UnivariateRule):
        return (rule.band,)
    return (Band.NIR, Band.NDVI)


def extract_errors_from_arrays(
    pixel_id: str,
    arrays: SeriesArrays,
    models: Mapping[int, Mapping[Band, HarmonicModel]],
    windows: Sequence[WindowPair],
    bands: Sequence[Band],
) -> list[WindowErrors]:
    """Prediction errors over each extended prediction window.

    A date enters the sequence only if the observation is clear and every
    requested band carries a real (non-fill) value, so all band sequences
    share one date axis.
    """
    band_cols = [BAND_ORDER.index(b) for b in bands]
    out = []
    for wp in windows:
        band_models = models.get(wp.index)
        if band_models is None or any(b not in band_models for b in bands):
            raise NoModels(f"pixel {pixel_id!r}: no model for window {wp.index}")
        mask = (
            arrays.clear
            & (arrays.ordinals >= wp.predict.start.toordinal())
            & (arrays.ordinals <= wp.predict.end.toordinal())
        )
        for col in band_cols:
            mask &= ~np.isnan(arrays.values[:, col])
        idx = np.flatnonzero(mask)
        ordinals = arrays.ordinals[idx]
        we = WindowErrors(
            window_index=wp.index,
            dates=[dt.date.fromordinal(int(o)) for o in ordinals],
            composite_dates=[
                dt.date.fromordinal(int(o)) for o in arrays.comp_ordinals[idx]
            ],
            doys=arrays.doys[idx].astype(float),
            start_ok=(ordinals >= wp.predict_year.start.toordinal())
            & (ordinals <= wp.predict_year.end.toordinal()),
        )
        for band, col in zip(bands, band_cols):
            predicted = predict_many(band_models[band].coeff_array(), we.doys)
            we.errors[band] = arrays.values[idx, col] - predicted
        out.append(we)
    return out


def extract_window_errors(
    series: PixelSeries,
    models: Mapping[int, Mapping[Band, HarmonicModel]],
    windows: Sequence[WindowPair],
    bands: Sequence[Band],
) -> list[WindowErrors]:
    return extract_errors_from_arrays(
        series.pixel_id, series.to_arrays(), models, windows, bands
    )


def mahalanobis_series(
    we: WindowErrors,
    table: CubeCovarianceTable,
    site_id: str,
    col: int,
    row: int,
) -> np.ndarray:
    """Index value at each date of the window, using the date's cube."""
    values = np.empty(len(we.dates))
    cache: dict[int, np.ndarray] = {}
    for i, doy in enumerate(we.doys):
        square, period = cube_of(col, row, int(doy))
        sigma = cache.get(period)
        if sigma is None:
            sigma = table.matrix_for(site_id, square, period)
            cache[period] = sigma
        values[i] = mahalanobis_index(
            we.errors[Band.NIR][i], we.errors[Band.NDVI][i], sigma
        )
    return values


# --- run scanning ----------------------------------------------------------


def _windows_all(mask: np.ndarray, width: int) -> np.ndarray:
    """mask[i:i+width].all() for every valid start i."""
    if mask.size < width:
        return np.zeros(0, dtype=bool)
    counts = np.concatenate([[0], np.cumsum(mask)])
    return (counts[width:] - counts[:-width]) == width


def _sliding_min(values: np.ndarray, width: int) -> np.ndarray:
    if values.size < width:
        return np.empty(0)
    out = values[: values.size - width + 1].copy()
    for k in range(1, width):
        np.minimum(out, values[k : k + out.size], out)
    return out


def _first_run_start(
    values: np.ndarray,
    start_ok: np.ndarray,
    threshold: float,
    consecutive: int,
    two_sided: bool,
) -> Optional[int]:
    """Index of the earliest valid triggering run start, if any."""
    hits = _windows_all(values > threshold, consecutive)
    if two_sided:
        hits = hits | _windows_all(values < -threshold, consecutive)
    if not hits.size:
        return None
    hits &= start_ok[: hits.size]
    idx = np.flatnonzero(hits)
    return int(idx[0]) if idx.size else None


def flag_level(
    values: np.ndarray,
    start_ok: np.ndarray,
    consecutive: int,
    two_sided: bool = True,
) -> float:
    """Supremum of thresholds at which this sequence still triggers.

    The sequence triggers at threshold L exactly when flag_level > L,
    which lets threshold sweeps reuse one pass over the data.
    """
    level = -math.inf
    if values.size < consecutive:
        return level
    n_starts = values.size - consecutive + 1
    ok = start_ok[:n_starts]
    if not ok.any():
        return level
    mins = _sliding_min(values, consecutive)[ok]
    if mins.size:
        level = max(level, float(mins.max()))
    if two_sided:
        mins = _sliding_min(-values, consecutive)[ok]
        if mins.size:
            level = max(level, float(mins.max()))
    return level


def detect_pixel(
    series: PixelSeries,
    models: Mapping[int, Mapping[Band, HarmonicModel]],
    rule: DetectionRule,
    windows: Sequence[WindowPair],
    site_id: Optional[str] = None,
) -> DetectionResult:
    """Apply the rule over every prediction window of one pixel.

    The flag date is the last date of the earliest triggering run
    (detection time, not event time).
    """
    wes = extract_window_errors(series, models, windows, rule_bands(rule))
    return scan_window_errors(
        wes, rule, pixel_id=series.pixel_id, site_id=site_id,
        col=series.col, row=series.row,
    )


def scan_window_errors(
    wes_list: Sequence[WindowErrors],
    rule: DetectionRule,
    *,
    pixel_id: str,
    site_id: Optional[str] = None,
    col: int = 0,
    row: int = 0,
) -> DetectionResult:
    """Rule evaluation over precomputed (possibly standardized) errors."""
    c = rule.consecutive
    best_date: Optional[dt.date] = None
    best_band: Optional[Band] = None
    for we in wes_list:
        if isinstance(rule, UnivariateRule):
            start = _first_run_start(
                we.errors[rule.band], we.start_ok, rule.threshold, c, True
            )
            band_hit = None
        elif isinstance(rule, MultivariateRule):
            start_nir = _first_run_start(
                we.errors[Band.NIR], we.start_ok, rule.nir_threshold, c, True
            )
            start_ndvi = _first_run_start(
                we.errors[Band.NDVI], we.start_ok, rule.ndvi_threshold, c, True
            )
            if start_nir is None:
                start, band_hit = start_ndvi, Band.NDVI
            elif start_ndvi is None or start_nir <= start_ndvi:
                start, band_hit = start_nir, Band.NIR
            else:
                start, band_hit = start_ndvi, Band.NDVI
        else:
            if site_id is None:
                raise OutOfRange("Mahalanobis detection requires a site_id")
            index_values = mahalanobis_series(
                we, rule.covariances, site_id, col, row
            )
            # The index is nonnegative, so only the "> L" branch can fire.
            start = _first_run_start(index_values, we.start_ok, rule.threshold, c, False)
            band_hit = None
        if start is not None:
            flag_date = we.dates[start + c - 1]
            if best_date is None or flag_date < best_date:
                best_date = flag_date
                best_band = band_hit
    if best_date is None:
        return DetectionResult(pixel_id=pixel_id, flagged=False)
    return DetectionResult(
        pixel_id=pixel_id,
        flagged=True,
        first_flag_date=best_date,
        triggering_band=best_band if isinstance(rule, MultivariateRule) else None,
    )

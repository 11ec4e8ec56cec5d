"""Per-pixel harmonic reflectance model.

The seasonal signal of one band at one pixel is modelled as

    value(d) = a0 + a1*cos(2*pi*d/366) + b1*sin(2*pi*d/366)
                  + a2*cos(4*pi*d/366) + b2*sin(4*pi*d/366)

where d is the composite day of the year. Coefficients are fitted by
ordinary least squares over the clear observations of a training window.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
import numpy as np

from .core import Band, Observation, PixelSeries, YEAR_DAYS, is_clear
from .errors import InsufficientData, MissingBandValue, OutOfRangeDay, RankDeficient
from .windows import DateInterval

N_COEFFS = 5

# At least 2x the parameter count; a two-year window holds at most 46 dates.
MIN_OBS = 12

# Reciprocal condition number below this aborts a fit (clustered composite
# days under heavy cloud can make the normal equations singular).
RCOND_MIN = 1e-10

_TWO_PI = 2.0 * math.pi


def design_vector(doy: int) -> np.ndarray:
    """Regressor vector (1, cos, sin, semi-annual cos, semi-annual sin)."""
    if not 1 <= doy <= YEAR_DAYS:
        raise OutOfRangeDay(f"day of year {doy} outside 1..{YEAR_DAYS}")
    w = _TWO_PI * doy / YEAR_DAYS
    return np.array([1.0, math.cos(w), math.sin(w), math.cos(2 * w), math.sin(2 * w)])


def design_matrix(doys: np.ndarray) -> np.ndarray:
    doys = np.asarray(doys, dtype=float)
    if doys.size and (doys.min() < 1 or doys.max() > YEAR_DAYS):
        raise OutOfRangeDay("day of year outside 1..366")
    w = _TWO_PI * doys / YEAR_DAYS
    return np.column_stack(
        [np.ones_like(w), np.cos(w), np.sin(w), np.cos(2 * w), np.sin(2 * w)]
    )


@dataclass(frozen=True)
class HarmonicModel:
    """Fitted coefficients for one (pixel, band) over one training window."""

    band: Band
    pixel_id: str
    coeffs: tuple[float, float, float, float, float]
    train_window: tuple[dt.date, dt.date]
    n_obs: int

    def coeff_array(self) -> np.ndarray:
        return np.asarray(self.coeffs)


def fit_arrays(
    doys: np.ndarray,
    values: np.ndarray,
    *,
    band: Band,
    pixel_id: str = "",
    train_window: tuple[dt.date, dt.date] = (dt.date.min, dt.date.max),
    min_obs: int = MIN_OBS,
) -> HarmonicModel:
    """OLS fit on prepared (composite doy, value) arrays.

    Solves the normal equations with a Cholesky factorization; a 5x5
    system does not warrant anything fancier.
    """
    doys = np.asarray(doys, dtype=float)
    values = np.asarray(values, dtype=float)
    if doys.size < min_obs:
        raise InsufficientData(
            f"pixel {pixel_id!r} band {band.name}: {doys.size} clear observations, "
            f"need {min_obs}"
        )
    design = design_matrix(doys)
    ata = design.T @ design
    eigs = np.linalg.eigvalsh(ata)
    if eigs[0] <= 0 or eigs[0] / eigs[-1] < RCOND_MIN:
        raise RankDeficient(
            f"pixel {pixel_id!r} band {band.name}: normal equations singular "
            f"(rcond ~ {max(eigs[0], 0.0) / eigs[-1]:.2e})"
        )
    aty = design.T @ values
    chol = np.linalg.cholesky(ata)
    coeffs = np.linalg.solve(chol.T, np.linalg.solve(chol, aty))
    return HarmonicModel(
        band=band,
        pixel_id=pixel_id,
        coeffs=tuple(float(c) for c in coeffs),
        train_window=train_window,
        n_obs=int(doys.size),
    )


def fit(
    series: PixelSeries,
    band: Band,
    window: DateInterval,
    *,
    min_obs: int = MIN_OBS,
) -> HarmonicModel:
    """Fit the model for one band over the clear in-window observations."""
    doys = []
    values = []
    for obs in series.observations:
        if obs.nominal_date not in window or not is_clear(obs):
            continue
        value = obs.band_value(band)
        if value is None:
            continue
        doys.append(obs.composite_doy)
        values.append(value)
    return fit_arrays(
        np.array(doys, dtype=float),
        np.array(values, dtype=float),
        band=band,
        pixel_id=series.pixel_id,
        train_window=(window.start, window.end),
        min_obs=min_obs,
    )


def predict(model: HarmonicModel, doy: int) -> float:
    return float(np.dot(model.coeffs, design_vector(doy)))


def predict_many(coeffs: np.ndarray, doys: np.ndarray) -> np.ndarray:
    return design_matrix(doys) @ np.asarray(coeffs)


def residual(model: HarmonicModel, obs: Observation, band: Band) -> float:
    """Prediction error, observed minus predicted."""
    value = obs.band_value(band)
    if value is None:
        raise MissingBandValue(f"observation {obs.nominal_date} has no {band.name} value")
    return value - predict(model, obs.composite_doy)


# --- inter-annual variant -------------------------------------------------
#
# Adds a two-year harmonic pair on a continuous day axis. Kept for model
# comparison experiments only; the pipeline always uses the 5-coefficient
# model above.

N_COEFFS_INTERANNUAL = 7


def interannual_design_matrix(days_since_anchor: np.ndarray) -> np.ndarray:
    x = np.asarray(days_since_anchor, dtype=float)
    w = _TWO_PI * x / YEAR_DAYS
    return np.column_stack(
        [
            np.ones_like(w),
            np.cos(w),
            np.sin(w),
            np.cos(w / 2.0),  # two-year cycle
            np.sin(w / 2.0),
            np.cos(2 * w),
            np.sin(2 * w),
        ]
    )


def fit_interannual(days_since_anchor: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Least-squares coefficients of the 7-term inter-annual model."""
    x = np.asarray(days_since_anchor, dtype=float)
    if x.size < 2 * N_COEFFS_INTERANNUAL:
        raise InsufficientData(
            f"{x.size} observations, need {2 * N_COEFFS_INTERANNUAL}"
        )
    design = interannual_design_matrix(x)
    coeffs, *_ = np.linalg.lstsq(design, np.asarray(values, dtype=float), rcond=None)
    return coeffs


def predict_interannual(
    coeffs: np.ndarray,
    days_since_anchor: np.ndarray,
    keep_interannual: bool = True,
) -> np.ndarray:
    used = np.array(coeffs, dtype=float, copy=True)
    if not keep_interannual:
        used[3:5] = 0.0
    return interannual_design_matrix(days_since_anchor) @ used

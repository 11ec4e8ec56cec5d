"""Prediction-error standardization schemes.

Errors can be rescaled by a sample standard deviation or mapped through an
empirical CDF, with the statistic pooled by pixel, by 5-day period (across
all sites or per site), or by space-time cube. Two-stage schemes apply the
date-keyed stage first and the pixel-keyed stage second; an ECDF used as an
intermediate stage is followed by the inverse normal CDF so that the next
stage sees roughly normal values, while a final ECDF stage is shifted by
-0.5 to a symmetric uniform range.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .core import Band, day_of_year
from .detection import cube_of, period_of
from .errors import (
    DegenerateHistory,
    EmptyHistory,
    EmptySample,
    OutOfDomain,
)


class Scheme(Enum):
    """The 17 standardization schemes, identified by their short codes."""

    IDENTITY = "---"
    DAY_SD_OVERALL = "2"
    DAY_SD_SITE = "3"
    DAY_ECDF_OVERALL = "II"
    DAY_ECDF_SITE = "III"
    PIXEL_SD = "1"
    PIXEL_ECDF = "I"
    DAY_PIXEL_SD_OVERALL_SD = "4a"
    DAY_PIXEL_SD_SITE_SD = "4b"
    DAY_PIXEL_ECDF_OVERALL_SD = "II.1"
    DAY_PIXEL_ECDF_SITE_SD = "III.1"
    DAY_PIXEL_SD_OVERALL_ECDF = "2.I"
    DAY_PIXEL_SD_SITE_ECDF = "3.I"
    DAY_PIXEL_ECDF_OVERALL_ECDF = "IVi"
    DAY_PIXEL_ECDF_SITE_ECDF = "IVii"
    CUBE_SD = "4c"
    CUBE_ECDF = "IViii"

    @classmethod
    def from_code(cls, code: str) -> "Scheme":
        try:
            return cls(code)
        except ValueError:
            raise OutOfDomain(
                f"unknown scheme code {code!r}; valid codes: "
                + ", ".join(s.value for s in cls)
            ) from None


class KeyKind(Enum):
    PIXEL = "pixel"
    PERIOD = "period"
    SITE_PERIOD = "site_period"
    CUBE = "cube"
    SITE = "site"
    GLOBAL = "global"


SD = "sd"
ECDF = "ecdf"

# (key kind, transform kind) per stage, in application order.
SCHEME_STAGES: dict[Scheme, tuple[tuple[KeyKind, str], ...]] = {
    Scheme.IDENTITY: (),
    Scheme.DAY_SD_OVERALL: ((KeyKind.PERIOD, SD),),
    Scheme.DAY_SD_SITE: ((KeyKind.SITE_PERIOD, SD),),
    Scheme.DAY_ECDF_OVERALL: ((KeyKind.PERIOD, ECDF),),
    Scheme.DAY_ECDF_SITE: ((KeyKind.SITE_PERIOD, ECDF),),
    Scheme.PIXEL_SD: ((KeyKind.PIXEL, SD),),
    Scheme.PIXEL_ECDF: ((KeyKind.PIXEL, ECDF),),
    Scheme.DAY_PIXEL_SD_OVERALL_SD: ((KeyKind.PERIOD, SD), (KeyKind.PIXEL, SD)),
    Scheme.DAY_PIXEL_SD_SITE_SD: ((KeyKind.SITE_PERIOD, SD), (KeyKind.PIXEL, SD)),
    Scheme.DAY_PIXEL_ECDF_OVERALL_SD: ((KeyKind.PERIOD, ECDF), (KeyKind.PIXEL, SD)),
    Scheme.DAY_PIXEL_ECDF_SITE_SD: ((KeyKind.SITE_PERIOD, ECDF), (KeyKind.PIXEL, SD)),
    Scheme.DAY_PIXEL_SD_OVERALL_ECDF: ((KeyKind.PERIOD, SD), (KeyKind.PIXEL, ECDF)),
    Scheme.DAY_PIXEL_SD_SITE_ECDF: ((KeyKind.SITE_PERIOD, SD), (KeyKind.PIXEL, ECDF)),
    Scheme.DAY_PIXEL_ECDF_OVERALL_ECDF: ((KeyKind.PERIOD, ECDF), (KeyKind.PIXEL, ECDF)),
    Scheme.DAY_PIXEL_ECDF_SITE_ECDF: ((KeyKind.SITE_PERIOD, ECDF), (KeyKind.PIXEL, ECDF)),
    Scheme.CUBE_SD: ((KeyKind.CUBE, SD),),
    Scheme.CUBE_ECDF: ((KeyKind.CUBE, ECDF),),
}

# Sparse or degenerate keys fall back to coarser pools, ending at the
# global pool which always exists for a non-empty history.
FALLBACK_LEVELS: dict[KeyKind, tuple[KeyKind, ...]] = {
    KeyKind.PIXEL: (KeyKind.PIXEL, KeyKind.SITE, KeyKind.GLOBAL),
    KeyKind.PERIOD: (KeyKind.PERIOD, KeyKind.GLOBAL),
    KeyKind.SITE_PERIOD: (KeyKind.SITE_PERIOD, KeyKind.PERIOD, KeyKind.GLOBAL),
    KeyKind.CUBE: (KeyKind.CUBE, KeyKind.SITE_PERIOD, KeyKind.SITE, KeyKind.GLOBAL),
}


@dataclass(frozen=True)
class ErrorContext:
    """Where and when a prediction error was observed."""

    pixel_id: str
    site_id: str
    col: int
    row: int
    date: dt.date


@dataclass(frozen=True)
class ErrorRecord(ErrorContext):
    value: float


def _key_for(kind: KeyKind, ctx: ErrorContext):
    if kind is KeyKind.PIXEL:
        return ctx.pixel_id
    if kind is KeyKind.SITE:
        return ctx.site_id
    if kind is KeyKind.GLOBAL:
        return None
    period = period_of(day_of_year(ctx.date))
    if kind is KeyKind.PERIOD:
        return period
    if kind is KeyKind.SITE_PERIOD:
        return (ctx.site_id, period)
    square, _ = cube_of(ctx.col, ctx.row, day_of_year(ctx.date))
    return (ctx.site_id, square, period)


def ecdf_eval(sample: np.ndarray, x: float) -> float:
    """Rank-based ECDF value r/(n+1), clamped away from 0 and 1.

    The clamp keeps a subsequent inverse normal CDF finite for values
    outside the sample range.
    """
    sample = np.asarray(sample)
    n = sample.size
    if n == 0:
        raise EmptySample("ecdf evaluated on an empty sample")
    rank = int(np.searchsorted(sample, x, side="right"))
    return min(max(rank, 1), n) / (n + 1)


# Rational approximation of the normal quantile (Acklam's coefficients),
# polished with one Halley step against the erfc-based CDF.
_ICDF_A = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00,
)
_ICDF_B = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01,
)
_ICDF_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00,
)
_ICDF_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
    3.754408661907416e+00,
)
_ICDF_P_LOW = 0.02425
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _icdf_lower_half(p: float) -> float:
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if p < _ICDF_P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    else:
        q = p - 0.5
        r = q * q
        x = (
            (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5])
            * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
        )
    # Halley refinement against the exact CDF.
    err = _normal_cdf(x) - p
    u = err * _SQRT_2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def inverse_normal_cdf(p: float) -> float:
    """Standard normal quantile function."""
    if not 0.0 < p < 1.0:
        raise OutOfDomain(f"probability {p} outside (0, 1)")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -_icdf_lower_half(1.0 - p)
    return _icdf_lower_half(p)


@dataclass(frozen=True)
class StageTables:
    """Fitted lookup tables for one stage, most specific level first."""

    key_kind: KeyKind
    transform_kind: str
    sd_levels: tuple[tuple[KeyKind, dict], ...] = ()
    ecdf_levels: tuple[tuple[KeyKind, dict], ...] = ()

    def lookup_sd(self, ctx: ErrorContext) -> float:
        for kind, table in self.sd_levels:
            entry = table.get(_key_for(kind, ctx))
            if entry is not None and entry[1] >= 2 and entry[0] > 0:
                return entry[0]
        raise DegenerateHistory("no key with positive spread covers this context")

    def lookup_sample(self, ctx: ErrorContext) -> np.ndarray:
        for kind, table in self.ecdf_levels:
            sample = table.get(_key_for(kind, ctx))
            if sample is not None and sample.size:
                return sample
        raise DegenerateHistory("no populated sample covers this context")

    def apply(self, value: float, ctx: ErrorContext, final: bool) -> float:
        if self.transform_kind == SD:
            return value / self.lookup_sd(ctx)
        p = ecdf_eval(self.lookup_sample(ctx), value)
        if final:
            return p - 0.5
        return inverse_normal_cdf(p)


@dataclass(frozen=True)
class Standardizer:
    """Fitted transform for one band's prediction errors."""

    scheme: Scheme
    band: Band
    stages: tuple[StageTables, ...]


def _fit_stage(
    key_kind: KeyKind,
    transform_kind: str,
    contexts: Sequence[ErrorContext],
    values: np.ndarray,
) -> StageTables:
    levels = FALLBACK_LEVELS[key_kind]
    groups_per_level: list[dict] = []
    for kind in levels:
        groups: dict = {}
        for ctx, value in zip(contexts, values):
            groups.setdefault(_key_for(kind, ctx), []).append(value)
        groups_per_level.append(groups)
    if transform_kind == SD:
        sd_levels = tuple(
            (
                kind,
                {
                    key: (float(np.std(vals, ddof=1)) if len(vals) >= 2 else 0.0, len(vals))
                    for key, vals in groups.items()
                },
            )
            for kind, groups in zip(levels, groups_per_level)
        )
        global_sd, global_n = sd_levels[-1][1][None]
        if global_n < 2 or global_sd <= 0:
            raise DegenerateHistory("history has no spread; cannot standardize by sd")
        return StageTables(key_kind, SD, sd_levels=sd_levels)
    ecdf_levels = tuple(
        (kind, {key: np.sort(np.asarray(vals)) for key, vals in groups.items()})
        for kind, groups in zip(levels, groups_per_level)
    )
    return StageTables(key_kind, ECDF, ecdf_levels=ecdf_levels)


def fit_standardizer(
    history: Iterable[ErrorRecord],
    scheme: Scheme,
    band: Band,
) -> Standardizer:
    """Compute every table the scheme needs from the history alone.

    For two-stage schemes the second stage is fitted on history values
    already passed through the first stage.
    """
    records = list(history)
    if not records:
        raise EmptyHistory("cannot fit a standardizer on an empty history")
    contexts = [
        ErrorContext(r.pixel_id, r.site_id, r.col, r.row, r.date) for r in records
    ]
    values = np.array([r.value for r in records], dtype=float)
    specs = SCHEME_STAGES[scheme]
    stages: list[StageTables] = []
    for i, (key_kind, transform_kind) in enumerate(specs):
        stage = _fit_stage(key_kind, transform_kind, contexts, values)
        stages.append(stage)
        if i + 1 < len(specs):
            values = np.array(
                [stage.apply(v, ctx, final=False) for v, ctx in zip(values, contexts)]
            )
    return Standardizer(scheme=scheme, band=band, stages=tuple(stages))


def transform(std: Standardizer, eps: float, ctx: ErrorContext) -> float:
    """Standardized error for one observation context."""
    value = eps
    last = len(std.stages) - 1
    for i, stage in enumerate(std.stages):
        value = stage.apply(value, ctx, final=(i == last))
    return value

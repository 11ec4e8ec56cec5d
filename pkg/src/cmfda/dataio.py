"""File formats, label aggregation, and synthetic scene generation.

All text formats are comma-separated with a one-line versioned header
(``#cmfda <kind> v1 ...``) followed by a column-name row. Reals are
written with 9 significant digits, so values round-trip through that
precision; counts and dates round-trip exactly.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    BAND_ORDER,
    Band,
    DefoType,
    DeforestationLabel,
    Observation,
    PixelSeries,
    Reliability,
    SITE_SIDE,
    SiteGrid,
    band_fill,
    day_of_year,
)
from .detection import DetectionResult
from .errors import (
    InvalidConfig,
    OutOfRange,
    ParseError,
    SchemaVersionMismatch,
    ShapeMismatch,
)
from .harmonic import HarmonicModel, design_matrix
from .standardize import (
    ECDF,
    KeyKind,
    SD,
    SCHEME_STAGES,
    Scheme,
    StageTables,
    Standardizer,
)
from .training import ReportRow, TrainReport
from .windows import DateInterval

MAGIC = "#cmfda"
VERSION = "v1"

# NALCMS level-II class codes; 1-6 are the forest classes.
N_LANDUSE_CLASSES = 19
FOREST_CLASSES = frozenset(range(1, 7))

FINE_SIDE = 100          # 250 m cells per site side
FINE_PER_COARSE = 4      # 250 m cells per 1 km cell side


def real(x: float) -> str:
    return format(float(x), ".9g")


def pixel_name(site_id: str, col: int, row: int) -> str:
    return f"{site_id}-{col:02d}-{row:02d}"


# --- versioned header helpers ----------------------------------------------


def _write_header(fh, kind: str, meta: Optional[Mapping[str, str]] = None) -> None:
    parts = [MAGIC, kind, VERSION]
    for key, value in (meta or {}).items():
        parts.append(f"{key}={value}")
    fh.write(" ".join(parts) + "\n")


def _read_header(fh, kind: str, path) -> dict[str, str]:
    line = fh.readline().rstrip("\n")
    parts = line.split()
    if len(parts) < 3 or parts[0] != MAGIC or parts[1] != kind or parts[2] != VERSION:
        raise SchemaVersionMismatch(
            f"{path}: expected '{MAGIC} {kind} {VERSION}' header, got {line!r}"
        )
    meta = {}
    for part in parts[3:]:
        key, _, value = part.partition("=")
        meta[key] = value
    return meta


def _rows(fh, columns: Sequence[str], path):
    """Yield (line_number, row dict); enforces the column-name row."""
    reader = csv.reader(fh)
    try:
        names = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: missing column header", line=2) from None
    if names != list(columns):
        raise ParseError(f"{path}: expected columns {list(columns)}, got {names}", line=2)
    for i, row in enumerate(reader, start=3):
        if not row:
            continue
        if len(row) != len(columns):
            raise ParseError(
                f"{path}: expected {len(columns)} fields, got {len(row)}", line=i
            )
        yield i, dict(zip(columns, row))


def _parse_float(text: str, column: str, line: int, path) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}: bad real in column {column!r}: {text!r}", line=line) from None


def _parse_int(text: str, column: str, line: int, path) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}: bad integer in column {column!r}: {text!r}", line=line) from None


def _parse_date(text: str, column: str, line: int, path) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise ParseError(f"{path}: bad ISO date in column {column!r}: {text!r}", line=line) from None


# --- series files ------------------------------------------------------------

SERIES_COLUMNS = (
    "site_id", "pixel_id", "col", "row", "nominal_date", "composite_doy",
    "reliability", "red", "nir", "blue", "mir", "ndvi", "evi",
)


def write_series(path, sites: Mapping[str, Sequence[PixelSeries]]) -> None:
    with open(path, "w", newline="") as fh:
        _write_header(fh, "series")
        writer = csv.writer(fh)
        writer.writerow(SERIES_COLUMNS)
        for site_id, pixels in sites.items():
            for series in pixels:
                for obs in series.observations:
                    writer.writerow(
                        [
                            site_id,
                            series.pixel_id,
                            series.col,
                            series.row,
                            obs.nominal_date.isoformat(),
                            obs.composite_doy,
                            int(obs.reliability),
                        ]
                        + [real(obs.values.get(b, band_fill(b))) for b in BAND_ORDER]
                    )


def read_series(path) -> dict[str, list[PixelSeries]]:
    grouped: dict[tuple[str, str], dict] = {}
    with open(path, newline="") as fh:
        _read_header(fh, "series", path)
        for line, row in _rows(fh, SERIES_COLUMNS, path):
            rel_code = _parse_int(row["reliability"], "reliability", line, path)
            try:
                reliability = Reliability(rel_code)
            except ValueError:
                raise ParseError(
                    f"{path}: unknown reliability code {rel_code}", line=line
                ) from None
            values = {}
            for band, column in zip(BAND_ORDER, SERIES_COLUMNS[7:]):
                values[band] = _parse_float(row[column], column, line, path)
            try:
                obs = Observation(
                    nominal_date=_parse_date(row["nominal_date"], "nominal_date", line, path),
                    composite_doy=_parse_int(row["composite_doy"], "composite_doy", line, path),
                    values=values,
                    reliability=reliability,
                )
            except OutOfRange as exc:
                raise ParseError(f"{path}: {exc}", line=line) from None
            key = (row["site_id"], row["pixel_id"])
            entry = grouped.setdefault(
                key,
                {
                    "col": _parse_int(row["col"], "col", line, path),
                    "row": _parse_int(row["row"], "row", line, path),
                    "observations": [],
                },
            )
            entry["observations"].append(obs)
    out: dict[str, list[PixelSeries]] = {}
    for (site_id, pixel_id), entry in grouped.items():
        observations = sorted(entry["observations"], key=lambda o: o.nominal_date)
        try:
            series = PixelSeries(
                pixel_id=pixel_id,
                col=entry["col"],
                row=entry["row"],
                observations=tuple(observations),
            )
        except OutOfRange as exc:
            raise ParseError(f"{path}: pixel {pixel_id!r}: {exc}") from None
        out.setdefault(site_id, []).append(series)
    return out


# --- label files --------------------------------------------------------------

LABEL_COLUMNS = ("pixel_id", "col", "row", "defo_count", "z")


def write_labels(path, labels: Sequence[DeforestationLabel]) -> None:
    with open(path, "w", newline="") as fh:
        _write_header(fh, "labels")
        writer = csv.writer(fh)
        writer.writerow(LABEL_COLUMNS)
        for label in labels:
            writer.writerow([label.pixel_id, label.col, label.row, label.defo_count, label.z])


def read_labels(path) -> list[DeforestationLabel]:
    out = []
    with open(path, newline="") as fh:
        _read_header(fh, "labels", path)
        for line, row in _rows(fh, LABEL_COLUMNS, path):
            try:
                out.append(
                    DeforestationLabel(
                        pixel_id=row["pixel_id"],
                        col=_parse_int(row["col"], "col", line, path),
                        row=_parse_int(row["row"], "row", line, path),
                        defo_count=_parse_int(row["defo_count"], "defo_count", line, path),
                        z=_parse_int(row["z"], "z", line, path),
                    )
                )
            except OutOfRange as exc:
                raise ParseError(f"{path}: {exc}", line=line) from None
    return out


# --- fine land-use files -------------------------------------------------------

LANDUSE_COLUMNS = ("col", "row", "landuse_class")


def write_landuse(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    with open(path, "w", newline="") as fh:
        _write_header(fh, "landuse")
        writer = csv.writer(fh)
        writer.writerow(LANDUSE_COLUMNS)
        for r in range(grid.shape[0]):
            for c in range(grid.shape[1]):
                writer.writerow([c, r, int(grid[r, c])])


def read_landuse(path) -> np.ndarray:
    grid = np.zeros((FINE_SIDE, FINE_SIDE), dtype=np.int16)
    seen = np.zeros((FINE_SIDE, FINE_SIDE), dtype=bool)
    with open(path, newline="") as fh:
        _read_header(fh, "landuse", path)
        for line, row in _rows(fh, LANDUSE_COLUMNS, path):
            c = _parse_int(row["col"], "col", line, path)
            r = _parse_int(row["row"], "row", line, path)
            cls = _parse_int(row["landuse_class"], "landuse_class", line, path)
            if not (0 <= c < FINE_SIDE and 0 <= r < FINE_SIDE):
                raise ParseError(f"{path}: cell ({c}, {r}) outside the 100x100 grid", line=line)
            if not 1 <= cls <= N_LANDUSE_CLASSES:
                raise ParseError(f"{path}: land-use class {cls} outside 1..19", line=line)
            grid[r, c] = cls
            seen[r, c] = True
    if not seen.all():
        raise ParseError(f"{path}: {int((~seen).sum())} cells missing from the 100x100 grid")
    return grid


def aggregate_labels(
    fine_t0: np.ndarray, fine_t1: np.ndarray, site_id: str = "site"
) -> list[DeforestationLabel]:
    """Count forest -> non-forest 250 m flips inside each 1 km cell; the
    binary label is 1 when at least one subpixel flipped."""
    fine_t0 = np.asarray(fine_t0)
    fine_t1 = np.asarray(fine_t1)
    expected = (FINE_SIDE, FINE_SIDE)
    if fine_t0.shape != expected or fine_t1.shape != expected:
        raise ShapeMismatch(
            f"expected two {expected} grids, got {fine_t0.shape} and {fine_t1.shape}"
        )
    forest0 = np.isin(fine_t0, list(FOREST_CLASSES))
    forest1 = np.isin(fine_t1, list(FOREST_CLASSES))
    flips = forest0 & ~forest1
    counts = flips.reshape(SITE_SIDE, FINE_PER_COARSE, SITE_SIDE, FINE_PER_COARSE).sum(
        axis=(1, 3)
    )
    labels = []
    for r in range(SITE_SIDE):
        for c in range(SITE_SIDE):
            n = int(counts[r, c])
            labels.append(
                DeforestationLabel(
                    pixel_id=pixel_name(site_id, c, r),
                    col=c,
                    row=r,
                    defo_count=n,
                    z=1 if n >= 1 else 0,
                )
            )
    return labels


# --- model files ---------------------------------------------------------------

MODEL_COLUMNS = ("pixel_id", "band", "a0", "a1", "a2", "a3", "a4", "n_obs")


def save_models(
    path,
    models: Mapping[tuple[str, Band], HarmonicModel],
    train_window: DateInterval,
) -> None:
    with open(path, "w", newline="") as fh:
        _write_header(
            fh,
            "models",
            {
                "train_start": train_window.start.isoformat(),
                "train_end": train_window.end.isoformat(),
            },
        )
        writer = csv.writer(fh)
        writer.writerow(MODEL_COLUMNS)
        for (pixel_id, band), model in models.items():
            writer.writerow(
                [pixel_id, int(band)] + [real(c) for c in model.coeffs] + [model.n_obs]
            )


def load_models(path) -> tuple[DateInterval, dict[tuple[str, Band], HarmonicModel]]:
    with open(path, newline="") as fh:
        meta = _read_header(fh, "models", path)
        try:
            window = DateInterval(
                dt.date.fromisoformat(meta["train_start"]),
                dt.date.fromisoformat(meta["train_end"]),
            )
        except (KeyError, ValueError):
            raise ParseError(f"{path}: header lacks a valid training window", line=1) from None
        models = {}
        for line, row in _rows(fh, MODEL_COLUMNS, path):
            code = _parse_int(row["band"], "band", line, path)
            try:
                band = Band(code)
            except ValueError:
                raise ParseError(f"{path}: unknown band code {code}", line=line) from None
            coeffs = tuple(
                _parse_float(row[f"a{k}"], f"a{k}", line, path) for k in range(5)
            )
            models[(row["pixel_id"], band)] = HarmonicModel(
                band=band,
                pixel_id=row["pixel_id"],
                coeffs=coeffs,
                train_window=(window.start, window.end),
                n_obs=_parse_int(row["n_obs"], "n_obs", line, path),
            )
    return window, models


# --- standardizer files ----------------------------------------------------------

STANDARDIZER_COLUMNS = ("stage", "table", "kind", "key", "seq", "value")

_KEY_SEP = "|"


def _encode_key(kind: KeyKind, key) -> str:
    if kind is KeyKind.GLOBAL:
        return ""
    if kind in (KeyKind.PIXEL, KeyKind.SITE):
        return str(key)
    if kind is KeyKind.PERIOD:
        return str(key)
    return _KEY_SEP.join(str(part) for part in key)


def _decode_key(kind: KeyKind, text: str):
    if kind is KeyKind.GLOBAL:
        return None
    if kind in (KeyKind.PIXEL, KeyKind.SITE):
        return text
    if kind is KeyKind.PERIOD:
        return int(text)
    parts = text.split(_KEY_SEP)
    if kind is KeyKind.SITE_PERIOD:
        return (parts[0], int(parts[1]))
    return (parts[0], int(parts[1]), int(parts[2]))


def save_standardizer(path, std: Standardizer) -> None:
    # Standardizer reals are written exactly (shortest round-trip repr):
    # a chained ECDF stage ranks incoming values against these tables, so
    # any re-quantization would shift ranks at tie points.
    with open(path, "w", newline="") as fh:
        _write_header(
            fh, "standardizer", {"scheme": std.scheme.value, "band": std.band.name}
        )
        writer = csv.writer(fh)
        writer.writerow(STANDARDIZER_COLUMNS)
        for stage_idx, stage in enumerate(std.stages):
            for kind, table in stage.sd_levels:
                for key, (sd, n) in table.items():
                    writer.writerow(
                        [stage_idx, SD, kind.value, _encode_key(kind, key), n, repr(float(sd))]
                    )
            for kind, table in stage.ecdf_levels:
                for key, sample in table.items():
                    for seq, value in enumerate(sample):
                        writer.writerow(
                            [stage_idx, ECDF, kind.value, _encode_key(kind, key), seq, repr(float(value))]
                        )


def load_standardizer(path) -> Standardizer:
    with open(path, newline="") as fh:
        meta = _read_header(fh, "standardizer", path)
        try:
            scheme = Scheme(meta["scheme"])
            band = Band[meta["band"]]
        except (KeyError, ValueError):
            raise ParseError(f"{path}: header lacks a valid scheme/band", line=1) from None
        specs = SCHEME_STAGES[scheme]
        sd_data: list[dict] = [dict() for _ in specs]
        ecdf_data: list[dict] = [dict() for _ in specs]
        for line, row in _rows(fh, STANDARDIZER_COLUMNS, path):
            stage_idx = _parse_int(row["stage"], "stage", line, path)
            if not 0 <= stage_idx < len(specs):
                raise ParseError(f"{path}: stage {stage_idx} not in scheme", line=line)
            try:
                kind = KeyKind(row["kind"])
            except ValueError:
                raise ParseError(f"{path}: unknown key kind {row['kind']!r}", line=line) from None
            key = _decode_key(kind, row["key"])
            if row["table"] == SD:
                sd = _parse_float(row["value"], "value", line, path)
                n = _parse_int(row["seq"], "seq", line, path)
                sd_data[stage_idx].setdefault(kind, {})[key] = (sd, n)
            else:
                seq = _parse_int(row["seq"], "seq", line, path)
                value = _parse_float(row["value"], "value", line, path)
                ecdf_data[stage_idx].setdefault(kind, {}).setdefault(key, []).append((seq, value))
    stages = []
    from .standardize import FALLBACK_LEVELS

    for stage_idx, (key_kind, transform_kind) in enumerate(specs):
        levels = FALLBACK_LEVELS[key_kind]
        if transform_kind == SD:
            sd_levels = tuple(
                (kind, dict(sd_data[stage_idx].get(kind, {}))) for kind in levels
            )
            stages.append(StageTables(key_kind, SD, sd_levels=sd_levels))
        else:
            ecdf_levels = tuple(
                (
                    kind,
                    {
                        key: np.array([v for _, v in sorted(entries)])
                        for key, entries in ecdf_data[stage_idx].get(kind, {}).items()
                    },
                )
                for kind in levels
            )
            stages.append(StageTables(key_kind, ECDF, ecdf_levels=ecdf_levels))
    return Standardizer(scheme=scheme, band=band, stages=tuple(stages))


# --- covariance tables ----------------------------------------------------------

COVARIANCE_COLUMNS = ("level", "site", "square", "period", "var_nir", "cov", "var_ndvi", "n")


def save_covariances(path, table: "CubeCovarianceTable") -> None:
    from .detection import CubeCovarianceTable  # noqa: F401  (type only)

    with open(path, "w", newline="") as fh:
        _write_header(fh, "covariances", {"min_cube_samples": str(table.min_cube_samples)})
        writer = csv.writer(fh)
        writer.writerow(COVARIANCE_COLUMNS)
        for (site, square, period), e in table.cubes.items():
            writer.writerow(
                ["cube", site, square, period, real(e.var_nir), real(e.cov), real(e.var_ndvi), e.n]
            )
        for (site, period), e in table.site_periods.items():
            writer.writerow(
                ["site_period", site, "", period, real(e.var_nir), real(e.cov), real(e.var_ndvi), e.n]
            )
        for site, e in table.sites.items():
            writer.writerow(
                ["site", site, "", "", real(e.var_nir), real(e.cov), real(e.var_ndvi), e.n]
            )


def load_covariances(path) -> "CubeCovarianceTable":
    from .detection import CovarianceEntry, CubeCovarianceTable

    cubes = {}
    site_periods = {}
    sites = {}
    with open(path, newline="") as fh:
        meta = _read_header(fh, "covariances", path)
        for line, row in _rows(fh, COVARIANCE_COLUMNS, path):
            entry = CovarianceEntry(
                var_nir=_parse_float(row["var_nir"], "var_nir", line, path),
                cov=_parse_float(row["cov"], "cov", line, path),
                var_ndvi=_parse_float(row["var_ndvi"], "var_ndvi", line, path),
                n=_parse_int(row["n"], "n", line, path),
            )
            if row["level"] == "cube":
                key = (
                    row["site"],
                    _parse_int(row["square"], "square", line, path),
                    _parse_int(row["period"], "period", line, path),
                )
                cubes[key] = entry
            elif row["level"] == "site_period":
                site_periods[(row["site"], _parse_int(row["period"], "period", line, path))] = entry
            elif row["level"] == "site":
                sites[row["site"]] = entry
            else:
                raise ParseError(f"{path}: unknown level {row['level']!r}", line=line)
    return CubeCovarianceTable(
        cubes=cubes,
        site_periods=site_periods,
        sites=sites,
        min_cube_samples=int(meta.get("min_cube_samples", "10")),
    )


# --- detection files ----------------------------------------------------------

DETECTION_COLUMNS = ("pixel_id", "flagged", "first_flag_date", "triggering_band")


def write_detections(
    path, results: Sequence[DetectionResult], meta: Optional[Mapping[str, str]] = None
) -> None:
    with open(path, "w", newline="") as fh:
        _write_header(fh, "detections", meta)
        writer = csv.writer(fh)
        writer.writerow(DETECTION_COLUMNS)
        for res in results:
            writer.writerow(
                [
                    res.pixel_id,
                    int(res.flagged),
                    res.first_flag_date.isoformat() if res.first_flag_date else "",
                    res.triggering_band.name if res.triggering_band else "",
                ]
            )


def read_detections(path) -> tuple[dict[str, str], list[DetectionResult]]:
    out = []
    with open(path, newline="") as fh:
        meta = _read_header(fh, "detections", path)
        for line, row in _rows(fh, DETECTION_COLUMNS, path):
            flagged = bool(_parse_int(row["flagged"], "flagged", line, path))
            date = (
                _parse_date(row["first_flag_date"], "first_flag_date", line, path)
                if row["first_flag_date"]
                else None
            )
            band = Band[row["triggering_band"]] if row["triggering_band"] else None
            try:
                out.append(DetectionResult(row["pixel_id"], flagged, date, band))
            except OutOfRange as exc:
                raise ParseError(f"{path}: {exc}", line=line) from None
    return meta, out


# --- train reports --------------------------------------------------------------

REPORT_COLUMNS = (
    "scope", "consec", "threshold_1", "threshold_2",
    "train_tss", "cv_tss", "producer_acc", "user_acc",
)


def _opt(value: Optional[float]) -> str:
    return "" if value is None else real(value)


def write_report(path, report: TrainReport) -> None:
    meta = {"rule": report.rule_kind}
    if report.band is not None:
        meta["band"] = report.band.name
    with open(path, "w", newline="") as fh:
        _write_header(fh, "report", meta)
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            t1 = real(row.thresholds[0]) if row.thresholds else ""
            t2 = real(row.thresholds[1]) if len(row.thresholds) > 1 else ""
            writer.writerow(
                [
                    row.scope, row.consecutive, t1, t2,
                    _opt(row.train_tss), _opt(row.cv_tss),
                    _opt(row.producer_acc), _opt(row.user_acc),
                ]
            )


def read_report(path) -> TrainReport:
    with open(path, newline="") as fh:
        meta = _read_header(fh, "report", path)
        rows = []
        for line, row in _rows(fh, REPORT_COLUMNS, path):
            thresholds = tuple(
                _parse_float(row[c], c, line, path)
                for c in ("threshold_1", "threshold_2")
                if row[c]
            )
            def opt(column):
                return _parse_float(row[column], column, line, path) if row[column] else None
            rows.append(
                ReportRow(
                    scope=row["scope"],
                    consecutive=_parse_int(row["consec"], "consec", line, path),
                    thresholds=thresholds,
                    train_tss=opt("train_tss"),
                    cv_tss=opt("cv_tss"),
                    producer_acc=opt("producer_acc"),
                    user_acc=opt("user_acc"),
                )
            )
    band = Band[meta["band"]] if "band" in meta else None
    return TrainReport(rule_kind=meta.get("rule", ""), band=band, rows=tuple(rows))


def format_report_text(report: TrainReport) -> str:
    out = io.StringIO()
    title = f"Threshold training report ({report.rule_kind}"
    if report.band is not None:
        title += f", band {report.band.name}"
    title += ")"
    out.write(title + "\n" + "=" * len(title) + "\n")
    header = f"{'scope':<14}{'C':>3}{'threshold(s)':>22}{'train tss':>11}{'cv tss':>9}{'a_p':>7}{'a_u':>7}"
    out.write(header + "\n")
    for row in report.rows:
        thresholds = ", ".join(format(t, ".4g") for t in row.thresholds)
        def cell(value, width):
            return ("-" if value is None else format(value, ".4f")).rjust(width)
        out.write(
            f"{row.scope:<14}{row.consecutive:>3}{thresholds:>22}"
            + cell(row.train_tss, 11) + cell(row.cv_tss, 9)
            + cell(row.producer_acc, 7) + cell(row.user_acc, 7) + "\n"
        )
    return out.getvalue()


# --- synthetic scenes -------------------------------------------------------------


@dataclass(frozen=True)
class BandSignal:
    """Harmonic coefficients and noise level of one band's clean signal."""

    coeffs: tuple[float, float, float, float, float]
    noise_sd: float = 0.0


@dataclass(frozen=True)
class EventSpec:
    """A step change applied to every observation from ``date`` on."""

    pixels: tuple[tuple[int, int], ...]   # (col, row)
    date: dt.date
    shifts: Mapping[Band, float]


@dataclass(frozen=True)
class SynthConfig:
    site_id: str
    start: dt.date
    end: dt.date
    signals: Mapping[Band, BandSignal]
    cloud_prob: tuple[float, ...]         # monthly probability of a cloudy flag
    marginal_prob: float = 0.1
    events: tuple[EventSpec, ...] = ()
    seed: int = 0
    defo_type: DefoType = DefoType.UNKNOWN


# Real (non-fill) data ranges used to clip noisy synthetic values; kept
# inside the acceptance range and away from the fill codes.
_CLIP = {band: (0.0, 1.0) for band in BAND_ORDER[:4]}
_CLIP.update({band: (-0.2, 1.0) for band in BAND_ORDER[4:]})


def _validate_config(cfg: SynthConfig) -> None:
    if cfg.end < cfg.start:
        raise InvalidConfig("end date before start date")
    if len(cfg.cloud_prob) != 12:
        raise InvalidConfig("cloud_prob needs one probability per month")
    if any(not 0 <= p <= 1 for p in cfg.cloud_prob):
        raise InvalidConfig("cloud probabilities must lie in [0, 1]")
    if not 0 <= cfg.marginal_prob <= 1:
        raise InvalidConfig("marginal probability must lie in [0, 1]")
    if any(p + cfg.marginal_prob > 1 for p in cfg.cloud_prob):
        raise InvalidConfig("cloudy plus marginal probability exceeds 1")
    for band in BAND_ORDER:
        if band not in cfg.signals:
            raise InvalidConfig(f"missing signal for band {band.name}")
    # worst-case cumulative shift per band: shifts only stack on a pixel
    # hit by several events
    per_pixel: dict[tuple[int, int], dict[Band, float]] = {}
    for event in cfg.events:
        if not cfg.start <= event.date <= cfg.end:
            raise InvalidConfig(f"event date {event.date} outside the scene dates")
        for col, row in event.pixels:
            if not (0 <= col < SITE_SIDE and 0 <= row < SITE_SIDE):
                raise InvalidConfig(f"event pixel ({col}, {row}) outside the site")
            totals = per_pixel.setdefault((col, row), {})
            for band, shift in event.shifts.items():
                totals[band] = totals.get(band, 0.0) + shift
    down = {band: 0.0 for band in BAND_ORDER}
    up = {band: 0.0 for band in BAND_ORDER}
    for totals in per_pixel.values():
        for band, shift in totals.items():
            down[band] = min(down[band], shift)
            up[band] = max(up[band], shift)
    for band, signal in cfg.signals.items():
        if signal.noise_sd < 0:
            raise InvalidConfig(f"{band.name}: negative noise sd")
        amplitude = sum(abs(c) for c in signal.coeffs[1:])
        lo, hi = _CLIP[band]
        if signal.coeffs[0] - amplitude + down[band] < lo - 1e-9:
            raise InvalidConfig(f"{band.name}: clean signal can fall below {lo}")
        if signal.coeffs[0] + amplitude + up[band] > hi + 1e-9:
            raise InvalidConfig(f"{band.name}: clean signal can exceed {hi}")


def generate_site(cfg: SynthConfig) -> tuple[SiteGrid, list[DeforestationLabel]]:
    """Deterministic synthetic site: per-band harmonics plus noise, monthly
    cloud flags, and step-change events; labels mirror the event pixel set."""
    _validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    n_pixels = SITE_SIDE * SITE_SIDE

    dates = []
    d = cfg.start
    while d <= cfg.end:
        dates.append(d)
        d += dt.timedelta(days=16)
    n_dates = len(dates)
    months = np.array([d.month - 1 for d in dates])
    cloud_p = np.asarray(cfg.cloud_prob)[months]

    offsets = rng.integers(0, 16, size=(n_pixels, n_dates))
    quality_draw = rng.random(size=(n_pixels, n_dates))
    noise = {
        band: rng.standard_normal((n_pixels, n_dates)) * cfg.signals[band].noise_sd
        for band in BAND_ORDER
    }

    composite_dates = np.array(
        [[dates[j].toordinal() + offsets[i, j] for j in range(n_dates)] for i in range(n_pixels)]
    )
    composite_doys = np.array(
        [
            [day_of_year(dt.date.fromordinal(int(o))) for o in row]
            for row in composite_dates
        ]
    )

    reliability = np.where(
        quality_draw < cloud_p[None, :],
        int(Reliability.CLOUDY),
        np.where(
            quality_draw < cloud_p[None, :] + cfg.marginal_prob,
            int(Reliability.MARGINAL),
            int(Reliability.GOOD),
        ),
    )

    shift = {band: np.zeros((n_pixels, n_dates)) for band in BAND_ORDER}
    event_pixels: set[tuple[int, int]] = set()
    for event in cfg.events:
        post = np.array([d >= event.date for d in dates])
        for col, row in event.pixels:
            event_pixels.add((col, row))
            idx = row * SITE_SIDE + col
            for band, amount in event.shifts.items():
                shift[band][idx, post] += amount

    values = {}
    for band in BAND_ORDER:
        coeffs = np.asarray(cfg.signals[band].coeffs)
        clean = np.array(
            [design_matrix(composite_doys[i]) @ coeffs for i in range(n_pixels)]
        )
        lo, hi = _CLIP[band]
        values[band] = np.clip(clean + shift[band] + noise[band], lo, hi)

    pixels = []
    labels = []
    for row in range(SITE_SIDE):
        for col in range(SITE_SIDE):
            idx = row * SITE_SIDE + col
            observations = tuple(
                Observation(
                    nominal_date=dates[j],
                    composite_doy=int(composite_doys[idx, j]),
                    values={band: float(values[band][idx, j]) for band in BAND_ORDER},
                    reliability=Reliability(int(reliability[idx, j])),
                )
                for j in range(n_dates)
            )
            pid = pixel_name(cfg.site_id, col, row)
            pixels.append(PixelSeries(pid, col, row, observations))
            deforested = (col, row) in event_pixels
            labels.append(
                DeforestationLabel(
                    pixel_id=pid,
                    col=col,
                    row=row,
                    defo_count=16 if deforested else 0,
                    z=1 if deforested else 0,
                )
            )
    site = SiteGrid(site_id=cfg.site_id, pixels=tuple(pixels), defo_type=cfg.defo_type)
    return site, labels


# Monthly cloudy probabilities; the April-September wet season doubles the
# base rate.
def seasonal_cloud_prob(base: float = 0.06) -> tuple[float, ...]:
    return tuple(2 * base if 4 <= month <= 9 else base for month in range(1, 13))


_DEFAULT_SIGNALS = {
    Band.RED: BandSignal((0.08, 0.02, 0.012, 0.006, 0.004)),
    Band.NIR: BandSignal((0.42, 0.05, 0.03, 0.012, 0.008)),
    Band.BLUE: BandSignal((0.05, 0.01, 0.006, 0.003, 0.002)),
    Band.MIR: BandSignal((0.18, 0.03, 0.018, 0.008, 0.005)),
    Band.NDVI: BandSignal((0.68, -0.06, -0.04, 0.015, 0.01)),
    Band.EVI: BandSignal((0.55, -0.05, -0.03, 0.012, 0.008)),
}


def _with_noise(noise_sd: float) -> dict[Band, BandSignal]:
    return {
        band: BandSignal(signal.coeffs, noise_sd)
        for band, signal in _DEFAULT_SIGNALS.items()
    }


def _scenario_config(
    site_id: str,
    shifts: Mapping[Band, float],
    defo_type: DefoType,
    seed: int,
    noise_sd: float,
    n_events: int,
    first_year: int,
    event_years: Sequence[int],
    cloud_base: float,
) -> SynthConfig:
    picker = np.random.default_rng(seed + 987654321)
    chosen = picker.choice(SITE_SIDE * SITE_SIDE, size=n_events, replace=False)
    events = []
    for idx in sorted(int(i) for i in chosen):
        col, row = idx % SITE_SIDE, idx // SITE_SIDE
        year = int(picker.choice(list(event_years)))
        month = int(picker.integers(2, 11))
        day = int(picker.integers(1, 29))
        events.append(
            EventSpec(pixels=((col, row),), date=dt.date(year, month, day), shifts=dict(shifts))
        )
    last_predict_year = first_year + 6
    return SynthConfig(
        site_id=site_id,
        start=dt.date(first_year, 1, 1),
        end=dt.date(last_predict_year + 1, 5, 1),
        signals=_with_noise(noise_sd),
        cloud_prob=seasonal_cloud_prob(cloud_base),
        marginal_prob=0.08,
        events=tuple(events),
        seed=seed,
        defo_type=defo_type,
    )


def sonora_like_config(
    seed: int = 0,
    noise_sd: float = 0.02,
    n_events: int = 30,
    first_year: int = 2003,
    event_years: Sequence[int] = (2005, 2006, 2007, 2008, 2009),
    cloud_base: float = 0.06,
) -> SynthConfig:
    """Forest-to-water scene: deforestation shows as an NIR drop."""
    return _scenario_config(
        "sonora-like", {Band.NIR: -0.3}, DefoType.FOREST_TO_WATER,
        seed, noise_sd, n_events, first_year, event_years, cloud_base,
    )


def yucatan_like_config(
    seed: int = 0,
    noise_sd: float = 0.02,
    n_events: int = 30,
    first_year: int = 2003,
    event_years: Sequence[int] = (2005, 2006, 2007, 2008, 2009),
    cloud_base: float = 0.06,
) -> SynthConfig:
    """Forest-to-urban/cropland scene: deforestation shows as an NDVI drop."""
    return _scenario_config(
        "yucatan-like", {Band.NDVI: -0.3}, DefoType.FOREST_TO_URBAN_CROPLAND,
        seed, noise_sd, n_events, first_year, event_years, cloud_base,
    )

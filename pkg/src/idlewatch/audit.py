"""Validation battery over exported event files.

Runs the numbered data-quality tests against a static export CSV plus
optional GTFS static bundles: field data types (1-14), duplication
(15-16), missingness (17-30), coordinate bounds (31-36), spatial point
error against route shapes (37 onward, per city and region), temporal
contiguity (105-109), and expected idling duration (110-113).

Spatial point error converts the meter threshold to degrees with the
meters-per-degree-longitude correction D_d = D_m / (111320 * cos(phi)),
phi being the city's mean event latitude. This conversion is exact for
east-west displacement and off by up to 1/cos(phi) for north-south;
distances are Euclidean in degree space against shape vertices (a k-d
tree indexes points, not segments), so events near the middle of a long
straight segment can sit farther from the nearest vertex than from the
path itself. Both choices are deliberate properties of the benchmark
construction and are shared by the brute-force oracle used in tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .gtfs_static import BundleError, GtfsStatic, load_bundle
from .store import EXPORT_COLUMNS

#: Field order of the numbered per-field tests (differs from the export
#: column order, which puts trip_id ahead of route_id).
TEST_FIELD_ORDER = ("iata_id", "agency", "city", "country", "region",
                    "continent", "vehicle_id", "route_id", "trip_id",
                    "latitude", "longitude", "datetime", "duration")

EXPECTED_TYPES = {
    "iata_id": "string", "agency": "string", "city": "string",
    "country": "string", "region": "string", "continent": "string",
    "vehicle_id": "string", "route_id": "string", "trip_id": "string",
    "latitude": "float", "longitude": "float",
    "datetime": "integer", "duration": "integer",
}

DEFAULT_DISTANCE_M = 25.0
DEFAULT_ADJUSTED_CUTOFF = 300.0
DEFAULT_BASE_CUTOFF = 60.0
DOWNTIME_GAP_SECONDS = 60.0


class SchemaMismatch(ValueError):
    """The file header does not match the export contract."""


class DegenerateLatitude(ValueError):
    """Mean latitude at or beyond the poles: no meter-degree conversion."""


class NoMapping(ValueError):
    """No event of the city can be matched to a route shape."""


# ---------------------------------------------------------------------------
# Export file loading


@dataclass
class ExportTable:
    """One parsed export file in the three views the battery needs:
    the raw header/rows, an all-string frame, and a type-inferred frame."""

    path: Optional[Path]
    header: "list[str]"
    raw_rows: "list[tuple]"
    frame: pd.DataFrame
    inferred: pd.DataFrame

    @classmethod
    def load(cls, path: "str | Path") -> "ExportTable":
        import csv

        path = Path(path)
        with path.open("r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0] if rows else []
        raw_rows = [tuple(r) for r in rows[1:]]
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        inferred = pd.read_csv(path)
        return cls(path=path, header=header, raw_rows=raw_rows,
                   frame=frame, inferred=inferred)

    @property
    def row_count(self) -> int:
        return len(self.raw_rows)


def _as_table(source: "ExportTable | str | Path") -> ExportTable:
    if isinstance(source, ExportTable):
        return source
    return ExportTable.load(source)


def _pct(count: float, total: int) -> float:
    return 100.0 * count / total if total else 0.0


# ---------------------------------------------------------------------------
# Data types (tests 1-14)


@dataclass(frozen=True)
class TypeVerdict:
    field: str
    expected: str
    observed: str
    passed: bool


def _classify_dtype(series: pd.Series) -> str:
    if series.dropna().empty:
        return "empty"
    if pd.api.types.is_bool_dtype(series):
        return "boolean"
    if pd.api.types.is_integer_dtype(series):
        return "integer"
    if pd.api.types.is_float_dtype(series):
        return "float"
    return "string"


def audit_types(source: "ExportTable | str | Path") -> "list[TypeVerdict]":
    """Per-field type verdicts, plus the leading table-object verdict.

    Raises SchemaMismatch when the header differs from the export
    contract. Empty columns pass vacuously (observed "empty").
    """
    table = _as_table(source)
    if list(table.header) != list(EXPORT_COLUMNS):
        raise SchemaMismatch(
            f"header {table.header!r} does not match export contract")
    verdicts = [TypeVerdict(field="object", expected="DataFrame",
                            observed=type(table.inferred).__name__,
                            passed=isinstance(table.inferred, pd.DataFrame))]
    for name in TEST_FIELD_ORDER:
        observed = _classify_dtype(table.inferred[name])
        expected = EXPECTED_TYPES[name]
        verdicts.append(TypeVerdict(
            field=name, expected=expected, observed=observed,
            passed=observed in (expected, "empty")))
    return verdicts


# ---------------------------------------------------------------------------
# Duplication (tests 15-16)


@dataclass(frozen=True)
class DuplicationResult:
    field_pct: float
    observation_pct: float


def audit_duplication(source: "ExportTable | str | Path") -> DuplicationResult:
    """Share of duplicated header names and of fully identical rows."""
    table = _as_table(source)
    header = table.header
    field_pct = _pct(len(header) - len(set(header)), len(header))
    observation_pct = _pct(table.row_count - len(set(table.raw_rows)),
                           table.row_count)
    return DuplicationResult(field_pct=field_pct, observation_pct=observation_pct)


# ---------------------------------------------------------------------------
# Missingness (tests 17-30)


@dataclass(frozen=True)
class MissingnessResult:
    by_field: "dict[str, float]"
    joint_route_trip_pct: float


def audit_missingness(source: "ExportTable | str | Path") -> MissingnessResult:
    """Per-field share of empty values; the joint entry counts rows where
    route_id and trip_id are both absent."""
    table = _as_table(source)
    n = table.row_count
    by_field = {name: _pct((table.frame[name] == "").sum(), n)
                for name in TEST_FIELD_ORDER}
    joint = 0
    if n:
        joint = ((table.frame["route_id"] == "")
                 & (table.frame["trip_id"] == "")).sum()
    return MissingnessResult(by_field=by_field,
                             joint_route_trip_pct=_pct(joint, n))


# ---------------------------------------------------------------------------
# Coordinate bounds (tests 31-36)


@dataclass(frozen=True)
class GeoBoundsResult:
    lat_zero_pct: float
    lat_over_pct: float
    lat_under_pct: float
    lon_zero_pct: float
    lon_over_pct: float
    lon_under_pct: float


def audit_geobounds(source: "ExportTable | str | Path") -> GeoBoundsResult:
    table = _as_table(source)
    n = table.row_count
    lat = pd.to_numeric(table.frame.get("latitude"), errors="coerce")
    lon = pd.to_numeric(table.frame.get("longitude"), errors="coerce")
    return GeoBoundsResult(
        lat_zero_pct=_pct((lat == 0.0).sum(), n),
        lat_over_pct=_pct((lat > 90.0).sum(), n),
        lat_under_pct=_pct((lat < -90.0).sum(), n),
        lon_zero_pct=_pct((lon == 0.0).sum(), n),
        lon_over_pct=_pct((lon > 180.0).sum(), n),
        lon_under_pct=_pct((lon < -180.0).sum(), n),
    )


# ---------------------------------------------------------------------------
# Spatial point error


def meters_to_degrees(d_m: float, phi: float) -> float:
    """Convert a meter distance to degrees at mean latitude ``phi``.

    Uses the meters-per-degree-longitude correction
    D_d = D_m / (111320 * cos(phi * pi / 180)).
    """
    if abs(phi) >= 90.0:
        raise DegenerateLatitude(f"mean latitude {phi} has no longitude scale")
    return d_m / (111_320.0 * math.cos(math.radians(phi)))


class ShapeIndex:
    """Per-shape k-d trees plus identifier lookups for one city.

    Shape candidates for an event resolve route_id first (all shapes of
    that route via trips), falling back to trip_id; an event matching
    neither is excluded from scoring.
    """

    def __init__(self, static: GtfsStatic):
        self.static = static
        self._trees = {shape_id: cKDTree(np.asarray(shape.points, dtype=float))
                       for shape_id, shape in static.shapes.items()}

    @property
    def has_mappings(self) -> bool:
        return bool(self._trees) and self.static.has_mappings

    def candidate_shapes(self, route_id: Optional[str],
                         trip_id: Optional[str]) -> tuple:
        if route_id:
            shapes = self.static.route_to_shapes.get(route_id)
            if shapes:
                return tuple(sorted(shapes))
        if trip_id:
            shape = self.static.trip_to_shape.get(trip_id)
            if shape is not None:
                return (shape,)
        return ()

    def min_distances(self, coords: np.ndarray, shape_ids: Sequence[str],
                      ) -> np.ndarray:
        """Per-point minimum degree-space distance to any candidate shape's
        vertices. ``coords`` is an (n, 2) array of (latitude, longitude)."""
        best = np.full(len(coords), np.inf)
        for shape_id in shape_ids:
            distances, _ = self._trees[shape_id].query(coords)
            np.minimum(best, distances, out=best)
        return best


@dataclass(frozen=True)
class SpatialErrorResult:
    error_pct: float
    scored: int
    excluded: int
    mean_latitude: float


def _scored_distances(events: pd.DataFrame, index: ShapeIndex,
                      ) -> tuple[np.ndarray, np.ndarray, int]:
    """Minimum shape distance per mappable event.

    Returns (distances, latitudes, excluded_count); events without a
    usable identifier mapping or with unparseable coordinates are
    excluded.
    """
    lat = pd.to_numeric(events["latitude"], errors="coerce")
    lon = pd.to_numeric(events["longitude"], errors="coerce")
    route = events["route_id"].astype(str).where(events["route_id"].notna(), "")
    trip = events["trip_id"].astype(str).where(events["trip_id"].notna(), "")
    valid = lat.notna() & lon.notna()
    excluded = int((~valid).sum())

    distances: "list[np.ndarray]" = []
    latitudes: "list[np.ndarray]" = []
    work = pd.DataFrame({"lat": lat[valid], "lon": lon[valid],
                         "route": route[valid], "trip": trip[valid]})
    for (route_id, trip_id), group in work.groupby(["route", "trip"], sort=False):
        shapes = index.candidate_shapes(route_id or None, trip_id or None)
        if not shapes:
            excluded += len(group)
            continue
        coords = group[["lat", "lon"]].to_numpy(dtype=float)
        distances.append(index.min_distances(coords, shapes))
        latitudes.append(coords[:, 0])
    if distances:
        return (np.concatenate(distances), np.concatenate(latitudes), excluded)
    return np.empty(0), np.empty(0), excluded


def spatial_point_error(events: pd.DataFrame, index: ShapeIndex,
                        d_m: float = DEFAULT_DISTANCE_M) -> SpatialErrorResult:
    """Share of a city's events farther than the converted threshold from
    every candidate shape vertex.

    Coverage per event is the clamped indicator min-distance <= D_d, so
    the result stays inside [0, 100] even when several candidate shapes
    cover one event. Raises NoMapping when no event can be scored.
    """
    distances, latitudes, excluded = _scored_distances(events, index)
    if len(distances) == 0:
        raise NoMapping(
            "no identifier-to-shape mapping could be established for this city")
    phi = float(latitudes.mean())
    threshold = meters_to_degrees(d_m, phi)
    error_pct = 100.0 * float((distances > threshold).mean())
    return SpatialErrorResult(error_pct=error_pct, scored=len(distances),
                              excluded=excluded, mean_latitude=phi)


@dataclass(frozen=True)
class SweepPoint:
    d_m: float
    unweighted_pct: float
    weighted_pct: float


def threshold_sweep(city_data: "dict[str, tuple[pd.DataFrame, ShapeIndex]]",
                    d_ms: Iterable[float] = range(0, 101),
                    ) -> "list[SweepPoint]":
    """Average spatial point error as a function of the meter threshold.

    The unweighted curve is the arithmetic mean over cities; the weighted
    curve weights each city by its scored observation count. Both curves
    are monotone non-increasing in the threshold.
    """
    per_city = []
    for city, (events, index) in sorted(city_data.items()):
        distances, latitudes, _ = _scored_distances(events, index)
        if len(distances) == 0:
            raise NoMapping(f"city {city!r} has no scorable events")
        per_city.append((distances, float(latitudes.mean()), len(distances)))
    if not per_city:
        raise NoMapping("no auditable city")
    points = []
    for d_m in d_ms:
        errors = np.array([
            100.0 * float((distances > meters_to_degrees(d_m, phi)).mean())
            for distances, phi, _ in per_city])
        weights = np.array([n for _, _, n in per_city], dtype=float)
        points.append(SweepPoint(
            d_m=float(d_m),
            unweighted_pct=float(errors.mean()),
            weighted_pct=float((errors * weights).sum() / weights.sum()),
        ))
    return points


# ---------------------------------------------------------------------------
# Temporal contiguity (tests 105-109)


@dataclass(frozen=True)
class TemporalResult:
    zero_pct: float
    negative_pct: float
    downtime_pct: float
    max_gap_seconds: float
    elapsed_seconds: float
    degenerate: bool


def audit_temporal(source: "ExportTable | str | Path") -> TemporalResult:
    """Validity and contiguity of the datetime field.

    Downtime is the summed duration of inter-observation gaps longer than
    one minute, as a share of total elapsed time; the max interval is the
    largest single gap. With fewer than two observations the contiguity
    figures degenerate to zero and are flagged.
    """
    table = _as_table(source)
    n = table.row_count
    values = pd.to_numeric(table.frame.get("datetime"), errors="coerce")
    zero_pct = _pct((values == 0).sum(), n)
    negative_pct = _pct((values < 0).sum(), n)
    stamps = np.sort(values.dropna().to_numpy(dtype=float))
    if len(stamps) < 2:
        return TemporalResult(zero_pct=zero_pct, negative_pct=negative_pct,
                              downtime_pct=0.0, max_gap_seconds=0.0,
                              elapsed_seconds=0.0, degenerate=True)
    gaps = np.diff(stamps)
    elapsed = float(stamps[-1] - stamps[0])
    downtime = float(gaps[gaps > DOWNTIME_GAP_SECONDS].sum())
    return TemporalResult(
        zero_pct=zero_pct, negative_pct=negative_pct,
        downtime_pct=_pct(downtime, int(elapsed)) if elapsed else 0.0,
        max_gap_seconds=float(gaps.max()),
        elapsed_seconds=elapsed, degenerate=elapsed == 0.0)


# ---------------------------------------------------------------------------
# Expected duration (tests 110-113)


@dataclass(frozen=True)
class DurationResult:
    zero_pct: float
    negative_pct: float
    idle_share_adjusted_pct: float
    idle_share_base_pct: float


def audit_duration(source: "ExportTable | str | Path",
                   adjusted_cutoff: float = DEFAULT_ADJUSTED_CUTOFF,
                   base_cutoff: float = DEFAULT_BASE_CUTOFF) -> DurationResult:
    """Validity of the duration field plus idle share of operational time.

    Episodes are reconstructed as the maximum duration per
    (iata_id, vehicle_id, datetime) group, since an episode is re-emitted
    every tick at growing duration. A vehicle's operational time spans its
    first episode start to its last emission (datetime + duration). The
    idle share sums episode lengths strictly above the cutoff over summed
    operational time: ``adjusted_cutoff`` is the five-minute policy
    definition, ``base_cutoff`` the detector's own minimum duration.
    """
    table = _as_table(source)
    n = table.row_count
    durations = pd.to_numeric(table.frame.get("duration"), errors="coerce")
    zero_pct = _pct((durations == 0).sum(), n)
    negative_pct = _pct((durations < 0).sum(), n)

    work = pd.DataFrame({
        "iata": table.frame.get("iata_id"),
        "vehicle": table.frame.get("vehicle_id"),
        "datetime": pd.to_numeric(table.frame.get("datetime"), errors="coerce"),
        "duration": durations,
    }).dropna(subset=["datetime", "duration"])
    if work.empty:
        return DurationResult(zero_pct=zero_pct, negative_pct=negative_pct,
                              idle_share_adjusted_pct=0.0,
                              idle_share_base_pct=0.0)

    episodes = (work.groupby(["iata", "vehicle", "datetime"])["duration"]
                .max().reset_index())
    work["ends"] = work["datetime"] + work["duration"]
    spans = work.groupby(["iata", "vehicle"]).agg(
        first_seen=("datetime", "min"), last_seen=("ends", "max"))
    total_operational = float((spans["last_seen"] - spans["first_seen"]).sum())
    if total_operational <= 0:
        return DurationResult(zero_pct=zero_pct, negative_pct=negative_pct,
                              idle_share_adjusted_pct=0.0,
                              idle_share_base_pct=0.0)
    adjusted = float(
        episodes.loc[episodes["duration"] > adjusted_cutoff, "duration"].sum())
    base = float(
        episodes.loc[episodes["duration"] > base_cutoff, "duration"].sum())
    return DurationResult(
        zero_pct=zero_pct, negative_pct=negative_pct,
        idle_share_adjusted_pct=100.0 * adjusted / total_operational,
        idle_share_base_pct=100.0 * base / total_operational,
    )


# ---------------------------------------------------------------------------
# Full battery


@dataclass(frozen=True)
class AuditEntry:
    number: Optional[int]
    name: str
    scope: str
    value: object
    unit: str = ""
    passed: Optional[bool] = None


@dataclass
class AuditReport:
    """Numbered results of one battery run, plus exclusions and the
    threshold sweep."""

    entries: "list[AuditEntry]"
    excluded_cities: "list[tuple[str, str]]" = field(default_factory=list)
    sweep: "list[SweepPoint]" = field(default_factory=list)
    zero_rows: bool = False
    errors: "list[str]" = field(default_factory=list)

    def __post_init__(self) -> None:
        numbers = [e.number for e in self.entries if e.number is not None]
        if len(numbers) != len(set(numbers)):
            raise ValueError("duplicate test numbers in report")
        for entry in self.entries:
            if entry.unit == "%" and not 0.0 <= float(entry.value) <= 100.0:
                raise ValueError(
                    f"test {entry.number}: percentage {entry.value} out of range")

    def entry(self, number: int) -> AuditEntry:
        for candidate in self.entries:
            if candidate.number == number:
                return candidate
        raise KeyError(f"no test numbered {number}")

    def to_dict(self) -> dict:
        return {
            "entries": [{"number": e.number, "name": e.name, "scope": e.scope,
                         "value": e.value, "unit": e.unit, "passed": e.passed}
                        for e in self.entries],
            "excluded_cities": [{"city": city, "reason": reason}
                                for city, reason in self.excluded_cities],
            "threshold_sweep": [{"d_m": p.d_m,
                                 "unweighted_pct": p.unweighted_pct,
                                 "weighted_pct": p.weighted_pct}
                                for p in self.sweep],
            "zero_rows": self.zero_rows,
            "errors": self.errors,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def format_table(self) -> str:
        lines = [f"{'No.':>4}  {'Test':<42} {'Scope':<26} Value",
                 "-" * 96]
        for entry in self.entries:
            number = "" if entry.number is None else str(entry.number)
            lines.append(f"{number:>4}  {entry.name:<42} {entry.scope:<26} "
                         f"{_format_value(entry)}")
        if self.excluded_cities:
            lines.append("")
            lines.append("Excluded cities:")
            for city, reason in self.excluded_cities:
                lines.append(f"  {city}: {reason}")
        if self.errors:
            lines.append("")
            lines.append("Battery errors:")
            for message in self.errors:
                lines.append(f"  {message}")
        if self.zero_rows:
            lines.append("")
            lines.append("Note: the export contained zero data rows; "
                         "percentages are vacuous.")
        return "\n".join(lines)


def _format_value(entry: AuditEntry) -> str:
    if entry.unit == "%":
        return f"{float(entry.value):.2f} %"
    if entry.unit == "seconds":
        return _format_duration(float(entry.value))
    if entry.passed is not None:
        flag = "pass" if entry.passed else "FAIL"
        return f"{entry.value} [{flag}]"
    return str(entry.value)


def _format_duration(seconds: float) -> str:
    seconds = int(round(seconds))
    hours, rest = divmod(seconds, 3600)
    minutes, secs = divmod(rest, 60)
    if hours:
        return f"{hours} hrs. {minutes} min."
    if minutes:
        return f"{minutes} min. {secs} sec."
    return f"{secs} sec."


def run_battery(export: "ExportTable | str | Path",
                gtfs_bundles: "Optional[dict[str, str | Path]]" = None,
                d_m: float = DEFAULT_DISTANCE_M,
                adjusted_cutoff: float = DEFAULT_ADJUSTED_CUTOFF,
                base_cutoff: float = DEFAULT_BASE_CUTOFF,
                include_sweep: bool = True) -> AuditReport:
    """Compose every audit into a single numbered report.

    ``gtfs_bundles`` maps city names (as they appear in the export) to
    GTFS static bundle paths; cities without a usable mapping are listed
    as excluded rather than failing the battery. Individual audit errors
    are collected without aborting the remaining tests.
    """
    table = _as_table(export)
    entries: "list[AuditEntry]" = []
    errors: "list[str]" = []
    excluded: "list[tuple[str, str]]" = []
    sweep: "list[SweepPoint]" = []

    try:
        verdicts = audit_types(table)
        names = ["Object"] + list(TEST_FIELD_ORDER)
        for number, (name, verdict) in enumerate(zip(names, verdicts), start=1):
            entries.append(AuditEntry(
                number=number, name=f"Data type: {name}", scope="global",
                value=verdict.observed, passed=verdict.passed))
    except SchemaMismatch as exc:
        errors.append(f"data types: {exc}")

    try:
        dup = audit_duplication(table)
        entries.append(AuditEntry(15, "Duplication: fields", "global",
                                  dup.field_pct, "%"))
        entries.append(AuditEntry(16, "Duplication: observations", "global",
                                  dup.observation_pct, "%"))
    except (KeyError, ValueError) as exc:
        errors.append(f"duplication: {exc}")

    try:
        missing = audit_missingness(table)
        number = 17
        for name in TEST_FIELD_ORDER:
            entries.append(AuditEntry(number, f"Missingness: {name}", "global",
                                      missing.by_field[name], "%"))
            number += 1
            if name == "trip_id":
                entries.append(AuditEntry(
                    number, "Missingness: route_id | trip_id", "global",
                    missing.joint_route_trip_pct, "%"))
                number += 1
    except (KeyError, ValueError) as exc:
        errors.append(f"missingness: {exc}")

    try:
        bounds = audit_geobounds(table)
        for number, (name, value) in enumerate([
            ("latitude zero values", bounds.lat_zero_pct),
            ("latitude exceed max (> 90)", bounds.lat_over_pct),
            ("latitude exceed min (< -90)", bounds.lat_under_pct),
            ("longitude zero values", bounds.lon_zero_pct),
            ("longitude exceed max (> 180)", bounds.lon_over_pct),
            ("longitude exceed min (< -180)", bounds.lon_under_pct),
        ], start=31):
            entries.append(AuditEntry(number, f"Bounds: {name}", "global",
                                      value, "%"))
    except (KeyError, ValueError) as exc:
        errors.append(f"coordinate bounds: {exc}")

    if gtfs_bundles:
        spatial_entries, excluded, sweep = _spatial_section(
            table, gtfs_bundles, d_m, include_sweep, errors)
        entries.extend(spatial_entries)

    try:
        temporal = audit_temporal(table)
        entries.append(AuditEntry(105, "Datetime: zero values", "global",
                                  temporal.zero_pct, "%"))
        entries.append(AuditEntry(106, "Datetime: negative values", "global",
                                  temporal.negative_pct, "%"))
        entries.append(AuditEntry(107, "Downtime (> 1 min.)", "global",
                                  temporal.downtime_pct, "%"))
        entries.append(AuditEntry(108, "Downtime max. interval", "global",
                                  temporal.max_gap_seconds, "seconds"))
        entries.append(AuditEntry(109, "Elapsed time", "global",
                                  temporal.elapsed_seconds, "seconds"))
    except (KeyError, ValueError) as exc:
        errors.append(f"temporal contiguity: {exc}")

    try:
        duration = audit_duration(table, adjusted_cutoff=adjusted_cutoff,
                                  base_cutoff=base_cutoff)
        entries.append(AuditEntry(110, "Duration: zero values", "global",
                                  duration.zero_pct, "%"))
        entries.append(AuditEntry(111, "Duration: negative values", "global",
                                  duration.negative_pct, "%"))
        entries.append(AuditEntry(
            112, f"Avg. idle adj. (> {int(adjusted_cutoff) // 60} min.)",
            "global", duration.idle_share_adjusted_pct, "%"))
        entries.append(AuditEntry(
            113, f"Avg. idle (> {int(base_cutoff)} sec.)", "global",
            duration.idle_share_base_pct, "%"))
    except (KeyError, ValueError) as exc:
        errors.append(f"expected duration: {exc}")

    return AuditReport(entries=entries, excluded_cities=excluded,
                       sweep=sweep, zero_rows=table.row_count == 0,
                       errors=errors)


def _spatial_section(table: ExportTable,
                     gtfs_bundles: "dict[str, str | Path]",
                     d_m: float, include_sweep: bool,
                     errors: "list[str]",
                     ) -> tuple["list[AuditEntry]", "list[tuple[str, str]]",
                                "list[SweepPoint]"]:
    """Per-city spatial errors with regional and global averages.

    Cities are numbered from 39 in (region, city) order, mirroring the
    battery layout: city rows first, then the region's unweighted and
    weighted averages; tests 37 and 38 hold the global averages.
    """
    entries: "list[AuditEntry]" = []
    excluded: "list[tuple[str, str]]" = []
    results: "dict[str, SpatialErrorResult]" = {}
    city_data: "dict[str, tuple[pd.DataFrame, ShapeIndex]]" = {}

    frame = table.frame
    cities_present = [c for c in frame.get("city", pd.Series(dtype=str)).unique() if c]
    city_region = {}
    for city in cities_present:
        rows = frame[frame["city"] == city]
        city_region[city] = rows["region"].iloc[0] if len(rows) else ""
        if city not in gtfs_bundles:
            excluded.append((city, "no GTFS static bundle configured"))
            continue
        try:
            index = ShapeIndex(load_bundle(gtfs_bundles[city]))
            if not index.has_mappings:
                raise NoMapping("bundle has no usable shapes")
            result = spatial_point_error(rows, index, d_m)
        except (BundleError, NoMapping, DegenerateLatitude) as exc:
            excluded.append((city, str(exc)))
            continue
        results[city] = result
        city_data[city] = (rows, index)

    unknown = sorted(set(gtfs_bundles) - set(cities_present))
    for city in unknown:
        excluded.append((city, "city not present in the export"))

    if not results:
        if cities_present:
            errors.append("spatial point error: no auditable city")
        return entries, excluded, []

    per_city_err = np.array([results[c].error_pct for c in sorted(results)])
    weights = np.array([results[c].scored for c in sorted(results)], dtype=float)
    entries.append(AuditEntry(37, f"Spatial error {int(d_m)}m: global avg (unweighted)",
                              "global", float(per_city_err.mean()), "%"))
    entries.append(AuditEntry(38, f"Spatial error {int(d_m)}m: global avg (weighted)",
                              "global",
                              float((per_city_err * weights).sum() / weights.sum()),
                              "%"))

    # Per-city and per-region rows occupy 39..104; past that window the
    # rows keep appearing unnumbered rather than colliding with the
    # temporal block.
    counter = iter(range(39, 105))

    def next_number() -> Optional[int]:
        return next(counter, None)

    by_region: "dict[str, list[str]]" = {}
    for city in sorted(results):
        by_region.setdefault(city_region.get(city, ""), []).append(city)
    for region in sorted(by_region):
        cities = by_region[region]
        errs = np.array([results[c].error_pct for c in cities])
        wts = np.array([results[c].scored for c in cities], dtype=float)
        for city in cities:
            entries.append(AuditEntry(
                next_number(), f"Spatial error {int(d_m)}m: {city}",
                f"city:{city}", results[city].error_pct, "%"))
        entries.append(AuditEntry(
            next_number(), f"Spatial error {int(d_m)}m: avg (unweighted)",
            f"region:{region}", float(errs.mean()), "%"))
        entries.append(AuditEntry(
            next_number(), f"Spatial error {int(d_m)}m: avg (weighted)",
            f"region:{region}", float((errs * wts).sum() / wts.sum()), "%"))

    sweep: "list[SweepPoint]" = []
    if include_sweep and city_data:
        try:
            sweep = threshold_sweep(city_data)
        except NoMapping as exc:
            errors.append(f"threshold sweep: {exc}")
    return entries, excluded, sweep

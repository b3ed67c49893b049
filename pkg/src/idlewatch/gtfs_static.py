"""GTFS static bundle loading: route shapes and their identifier mappings.

A bundle is the standard GTFS zip (or an unzipped directory) from which
two files matter here: ``trips.txt`` linking route_id/trip_id to shape_id,
and ``shapes.txt`` carrying the shape point sequences. Shapes act as the
geographic benchmark that recorded idling positions are validated against.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass
from pathlib import Path

import pandas as pd


class BundleError(ValueError):
    """The GTFS static bundle is missing required files or columns."""


@dataclass(frozen=True)
class RouteShape:
    """One route path shape: an ordered run of (latitude, longitude)."""

    shape_id: str
    points: tuple

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError(f"shape {self.shape_id} needs at least two points")
        for lat, lon in self.points:
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise ValueError(
                    f"shape {self.shape_id} has a point outside WGS84 bounds")


@dataclass(frozen=True)
class GtfsStatic:
    """Parsed bundle: shapes plus identifier-to-shape mappings."""

    shapes: "dict[str, RouteShape]"
    route_to_shapes: "dict[str, frozenset]"
    trip_to_shape: "dict[str, str]"

    @property
    def has_mappings(self) -> bool:
        return bool(self.shapes) and bool(self.route_to_shapes or self.trip_to_shape)


def _read_member(path: Path, name: str) -> io.BytesIO:
    if path.is_dir():
        member = path / name
        if not member.exists():
            raise BundleError(f"{path}: missing {name}")
        return io.BytesIO(member.read_bytes())
    try:
        with zipfile.ZipFile(path) as archive:
            return io.BytesIO(archive.read(name))
    except KeyError as exc:
        raise BundleError(f"{path}: missing {name}") from exc
    except (zipfile.BadZipFile, OSError) as exc:
        raise BundleError(f"{path}: unreadable bundle: {exc}") from exc


def load_bundle(path: "str | Path") -> GtfsStatic:
    """Parse a GTFS static zip or directory into shape mappings."""
    path = Path(path)
    trips = pd.read_csv(_read_member(path, "trips.txt"), dtype=str,
                        keep_default_na=False)
    shapes_table = pd.read_csv(_read_member(path, "shapes.txt"), dtype={
        "shape_id": str}, keep_default_na=False)
    for column in ("trip_id", "shape_id"):
        if column not in trips.columns:
            raise BundleError(f"{path}: trips.txt lacks {column}")
    for column in ("shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"):
        if column not in shapes_table.columns:
            raise BundleError(f"{path}: shapes.txt lacks {column}")

    shapes: dict[str, RouteShape] = {}
    ordered = shapes_table.assign(
        shape_pt_lat=pd.to_numeric(shapes_table["shape_pt_lat"], errors="coerce"),
        shape_pt_lon=pd.to_numeric(shapes_table["shape_pt_lon"], errors="coerce"),
        shape_pt_sequence=pd.to_numeric(shapes_table["shape_pt_sequence"],
                                        errors="coerce"),
    ).dropna(subset=["shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"])
    for shape_id, group in ordered.groupby("shape_id", sort=False):
        group = group.sort_values("shape_pt_sequence")
        points = tuple(zip(group["shape_pt_lat"].tolist(),
                           group["shape_pt_lon"].tolist()))
        if len(points) >= 2:
            shapes[str(shape_id)] = RouteShape(shape_id=str(shape_id),
                                               points=points)

    route_to_shapes: dict[str, set] = {}
    trip_to_shape: dict[str, str] = {}
    has_route = "route_id" in trips.columns
    for row in trips.itertuples(index=False):
        shape_id = str(getattr(row, "shape_id", "") or "")
        if shape_id not in shapes:
            continue
        trip_id = str(getattr(row, "trip_id", "") or "")
        if trip_id:
            trip_to_shape[trip_id] = shape_id
        if has_route:
            route_id = str(getattr(row, "route_id", "") or "")
            if route_id:
                route_to_shapes.setdefault(route_id, set()).add(shape_id)

    return GtfsStatic(
        shapes=shapes,
        route_to_shapes={k: frozenset(v) for k, v in route_to_shapes.items()},
        trip_to_shape=trip_to_shape,
    )

"""Shared domain types: vehicle position records, feed snapshots, idling
events, agency metadata, and detector parameters.

All types are immutable values and safe to share between concurrent tasks.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Optional

IATA_PATTERN = re.compile(r"^[A-Z]{3}$")

#: Five position attributes whose joint equality defines stationarity:
#: (vehicle_id, route_id, trip_id, latitude, longitude).
AttrTuple = tuple[str, Optional[str], Optional[str], float, float]


class RejectReason(enum.Enum):
    """Why a vehicle position record was refused at validation."""

    OUT_OF_BOUNDS_LAT = "OutOfBoundsLat"
    OUT_OF_BOUNDS_LON = "OutOfBoundsLon"
    ZERO_COORDINATE = "ZeroCoordinate"
    MISSING_IDS = "MissingIds"
    BAD_TIMESTAMP = "BadTimestamp"


@dataclass(frozen=True)
class VehicleRecord:
    """One vehicle's position sample at one instant.

    Coordinates are WGS84 degrees, carried at the precision delivered by
    the feed; they are never rounded before equality comparison because
    stationarity detection is exact attribute equality.
    """

    iata_id: str
    vehicle_id: str
    latitude: float
    longitude: float
    timestamp: int
    route_id: Optional[str] = None
    trip_id: Optional[str] = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.iata_id, self.vehicle_id)

    @property
    def attrs(self) -> AttrTuple:
        """The five attributes participating in the stationarity test."""
        return (self.vehicle_id, self.route_id, self.trip_id,
                self.latitude, self.longitude)


def validate_record(rec: VehicleRecord) -> "VehicleRecord | RejectReason":
    """Accept a record or name the first violated invariant.

    Total function: never raises. Accepting an already-accepted record
    returns it unchanged, so validation is idempotent.
    """
    if not isinstance(rec.timestamp, int) or rec.timestamp <= 0:
        return RejectReason.BAD_TIMESTAMP
    if not rec.vehicle_id or (not rec.route_id and not rec.trip_id):
        return RejectReason.MISSING_IDS
    if not -90.0 <= rec.latitude <= 90.0:
        return RejectReason.OUT_OF_BOUNDS_LAT
    if not -180.0 <= rec.longitude <= 180.0:
        return RejectReason.OUT_OF_BOUNDS_LON
    if rec.latitude == 0.0 or rec.longitude == 0.0:
        return RejectReason.ZERO_COORDINATE
    return rec


@dataclass(frozen=True)
class FeedSnapshot:
    """One deserialized regional feed poll: the rolling-buffer element.

    ``records`` is keyed by ``(iata_id, vehicle_id)``; construct through
    :meth:`from_records` to enforce the one-record-per-key rule.
    ``fetch_errors`` carries per-source failures of the poll that produced
    this snapshot, as ``(endpoint_url, reason)`` pairs.
    """

    region_id: str
    poll_time: int
    records: "dict[tuple[str, str], VehicleRecord]"
    fetch_errors: tuple = ()

    @classmethod
    def from_records(cls, region_id: str, poll_time: int,
                     records: Iterable[VehicleRecord],
                     fetch_errors: tuple = ()) -> "FeedSnapshot":
        """Build a snapshot, deduplicating colliding keys.

        On a key collision the record with the larger timestamp wins;
        timestamp ties keep the later-decoded record.
        """
        merged: dict[tuple[str, str], VehicleRecord] = {}
        for rec in records:
            held = merged.get(rec.key)
            if held is None or rec.timestamp >= held.timestamp:
                merged[rec.key] = rec
        return cls(region_id=region_id, poll_time=poll_time,
                   records=merged, fetch_errors=fetch_errors)

    def __len__(self) -> int:
        return len(self.records)


#: Serialized key order of an idling event, as streamed and stored.
EVENT_FIELDS = ("iata_id", "vehicle_id", "route_id", "trip_id",
                "latitude", "longitude", "datetime", "duration")


@dataclass(frozen=True)
class IdlingEvent:
    """One detected idling event.

    ``datetime`` is the Unix epoch second marking the event start;
    ``duration`` the seconds elapsed since that start, always a positive
    multiple of the polling interval under step-count accounting.
    """

    iata_id: str
    vehicle_id: str
    route_id: Optional[str]
    trip_id: Optional[str]
    latitude: float
    longitude: float
    datetime: int
    duration: int

    def as_dict(self) -> dict:
        """Event as a plain dict in the canonical wire key order."""
        return {name: getattr(self, name) for name in EVENT_FIELDS}


@dataclass(frozen=True)
class AgencyInfo:
    """Dimension-table row describing one fleet, keyed by IATA code."""

    iata_id: str
    agency: str
    city: str
    country: str
    region: str
    continent: str

    def __post_init__(self) -> None:
        if not IATA_PATTERN.match(self.iata_id):
            raise ValueError(
                f"iata_id must be a three-letter uppercase code, got {self.iata_id!r}")


@dataclass(frozen=True)
class DetectorParams:
    """Tuning parameters of the idling detector.

    r: seconds between feed polls.
    h: idle horizon in buffer steps; with r unchanged, any stretch beyond
       (h+1)*r seconds is recorded as an idling event.
    m: maximum iterations a stationary candidate survives without being
       re-observed before it is evicted.
    """

    r: int = 30
    h: int = 1
    m: int = 10

    def __post_init__(self) -> None:
        for name in ("r", "h", "m"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def window(self) -> int:
        """Rolling buffer capacity: h + 2 snapshots."""
        return self.h + 2

    @property
    def min_duration(self) -> int:
        """Shortest reportable idling duration, (h+1)*r seconds."""
        return (self.h + 1) * self.r

"""Relational persistence of agencies and idling events, plus static CSV
export.

The schema is a plain dimension/fact pair: an ``agency`` table keyed by
the three-letter IATA code, and an append-only ``events`` log joined on
it. Re-emissions of one idling episode at growing duration are distinct
rows by design -- the store records every emission tick.

The engine is embedded sqlite behind a narrow interface; writers from
multiple regional pipelines may insert concurrently, and an export sees a
consistent snapshot no newer than its start.
"""

from __future__ import annotations

import csv
import sqlite3
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .model import AgencyInfo, IdlingEvent

#: Export column order: the agency dimension first, then the event facts
#: with trip_id ahead of route_id, matching the canonical join query.
EXPORT_COLUMNS = ("iata_id", "agency", "city", "country", "region", "continent",
                  "vehicle_id", "trip_id", "route_id", "latitude", "longitude",
                  "datetime", "duration")


class DuplicateIata(ValueError):
    """An upsert batch carries conflicting rows for one IATA code."""


class UnknownIata(ValueError):
    """An event references an IATA code absent from the agency table."""


@dataclass(frozen=True)
class ExportRange:
    """Inclusive datetime window of an export, in epoch seconds."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"export range start {self.start} must precede end {self.end}")


_SCHEMA = """
CREATE TABLE IF NOT EXISTS agency (
    iata_id   TEXT PRIMARY KEY,
    agency    TEXT NOT NULL,
    city      TEXT NOT NULL,
    country   TEXT NOT NULL,
    region    TEXT NOT NULL,
    continent TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    iata_id    TEXT NOT NULL REFERENCES agency(iata_id),
    vehicle_id TEXT NOT NULL,
    route_id   TEXT,
    trip_id    TEXT,
    latitude   REAL NOT NULL,
    longitude  REAL NOT NULL,
    datetime   INTEGER NOT NULL,
    duration   INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS events_datetime ON events(datetime);
"""


class EventStore:
    """Embedded store for the agency dimension and the idling event log."""

    def __init__(self, path: "str | Path" = ":memory:"):
        self.path = str(path)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.executescript(_SCHEMA)
        self._conn.commit()

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "EventStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- agency dimension ---------------------------------------------------

    def upsert_agencies(self, rows: Sequence[AgencyInfo]) -> int:
        """Insert or update agency rows; one row per IATA code survives.

        The same row repeated in a batch is idempotent; two batch rows
        sharing an IATA code with different content raise DuplicateIata.
        """
        staged: dict[str, AgencyInfo] = {}
        for row in rows:
            held = staged.get(row.iata_id)
            if held is not None and held != row:
                raise DuplicateIata(
                    f"batch contains conflicting rows for {row.iata_id}")
            staged[row.iata_id] = row
        with self._lock:
            self._conn.executemany(
                "INSERT INTO agency (iata_id, agency, city, country, region, continent)"
                " VALUES (?, ?, ?, ?, ?, ?)"
                " ON CONFLICT(iata_id) DO UPDATE SET agency=excluded.agency,"
                " city=excluded.city, country=excluded.country,"
                " region=excluded.region, continent=excluded.continent",
                [(a.iata_id, a.agency, a.city, a.country, a.region, a.continent)
                 for a in staged.values()])
            self._conn.commit()
        return len(staged)

    def agencies(self) -> "list[AgencyInfo]":
        with self._lock:
            rows = self._conn.execute(
                "SELECT iata_id, agency, city, country, region, continent"
                " FROM agency ORDER BY iata_id").fetchall()
        return [AgencyInfo(*row) for row in rows]

    # -- event fact log -----------------------------------------------------

    def insert_events(self, batch: Iterable[IdlingEvent]) -> int:
        """Append a batch of events. Every IATA code must already exist in
        the agency table, otherwise UnknownIata is raised and nothing is
        inserted."""
        events = list(batch)
        if not events:
            return 0
        with self._lock:
            known = {row[0] for row in
                     self._conn.execute("SELECT iata_id FROM agency")}
            missing = sorted({e.iata_id for e in events} - known)
            if missing:
                raise UnknownIata(f"unknown iata_id(s): {', '.join(missing)}")
            self._conn.executemany(
                "INSERT INTO events (iata_id, vehicle_id, route_id, trip_id,"
                " latitude, longitude, datetime, duration)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                [(e.iata_id, e.vehicle_id, e.route_id, e.trip_id,
                  e.latitude, e.longitude, e.datetime, e.duration)
                 for e in events])
            self._conn.commit()
        return len(events)

    def count_events(self, window: Optional[ExportRange] = None) -> int:
        with self._lock:
            if window is None:
                (count,) = self._conn.execute(
                    "SELECT COUNT(*) FROM events").fetchone()
            else:
                (count,) = self._conn.execute(
                    "SELECT COUNT(*) FROM events WHERE datetime BETWEEN ? AND ?",
                    (window.start, window.end)).fetchone()
        return count

    # -- static export ------------------------------------------------------

    def export_rows(self, window: ExportRange) -> "list[tuple]":
        """Joined agency+event rows inside the window, deterministically
        ordered by (datetime, iata_id, vehicle_id)."""
        with self._lock:
            return self._conn.execute(
                "SELECT agency.iata_id, agency.agency, agency.city,"
                " agency.country, agency.region, agency.continent,"
                " events.vehicle_id, events.trip_id, events.route_id,"
                " events.latitude, events.longitude, events.datetime,"
                " events.duration"
                " FROM agency JOIN events ON agency.iata_id = events.iata_id"
                " WHERE events.datetime BETWEEN ? AND ?"
                " ORDER BY events.datetime, agency.iata_id, events.vehicle_id",
                (window.start, window.end)).fetchall()

    def export_csv(self, window: ExportRange, dest: "str | Path") -> int:
        """Write the export file; returns the number of data rows.

        Dialect: comma-separated, UTF-8, header row, minimal quoting.
        An empty window yields a header-only file. Missing route/trip ids
        are written as empty fields.
        """
        rows = self.export_rows(window)
        dest = Path(dest)
        with dest.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            writer.writerow(EXPORT_COLUMNS)
            for row in rows:
                writer.writerow(["" if value is None else value for value in row])
        return len(rows)

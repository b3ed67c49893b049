"""Deterministic synthetic fleet: scripted vehicles served as GTFS Realtime
feeds, plus the independent ground-truth oracle used to verify the
detector.

A script fixes every vehicle's movement as a waypoint timeline with idle
segments overriding it: during a segment the vehicle reports the exact
same coordinates on every poll, matching real feeds where a stationary
vehicle repeats identical floats. Coordinates are quantized to float32 on
output because that is the wire precision of GTFS Realtime positions.

The oracle derives expected idling events straight from the script by
scanning each vehicle's per-poll attribute tuples for runs of unchanged
values -- deliberately sharing no set-algebra code with the detector so
equivalence tests are meaningful.
"""

from __future__ import annotations

import asyncio
import json
import random
import struct
import time
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from ._http import BadRequest, BindFailure, read_request_head, simple_response
from .gtfsrt import VehicleEntity, build_feed
from .model import DetectorParams, FeedSnapshot, IdlingEvent, VehicleRecord


def _f32(value: float) -> float:
    """Round to the nearest float32, returned as a Python float."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


@dataclass(frozen=True)
class SimVehicle:
    """One scripted vehicle: identity plus a piecewise-linear path.

    ``waypoints`` is a time-ordered tuple of (t, latitude, longitude) in
    script seconds; positions clamp to the endpoints outside the covered
    range.
    """

    vehicle_id: str
    route_id: Optional[str]
    trip_id: Optional[str]
    waypoints: tuple

    def __post_init__(self) -> None:
        if not self.waypoints:
            raise ValueError(f"{self.vehicle_id}: waypoints must be non-empty")
        times = [w[0] for w in self.waypoints]
        if times != sorted(times):
            raise ValueError(f"{self.vehicle_id}: waypoints not time-ordered")


@dataclass(frozen=True)
class IdleSegment:
    """A stretch [start, start+length] (inclusive) of bit-stable position."""

    vehicle_id: str
    start: int
    length: int
    latitude: float
    longitude: float

    @property
    def end(self) -> int:
        return self.start + self.length

    def covers(self, t: float) -> bool:
        return self.start <= t <= self.end


@dataclass(frozen=True)
class FleetScript:
    """Complete deterministic description of a simulated fleet."""

    iata_id: str
    seed: int
    tick: int
    vehicles: tuple
    idle_segments: tuple

    def __post_init__(self) -> None:
        if self.tick < 1:
            raise ValueError("tick must be >= 1 second")
        known = {v.vehicle_id for v in self.vehicles}
        if len(known) != len(self.vehicles):
            raise ValueError("duplicate vehicle_id in script")
        per_vehicle: dict[str, list[IdleSegment]] = {}
        for seg in self.idle_segments:
            if seg.vehicle_id not in known:
                raise ValueError(f"idle segment for unknown vehicle {seg.vehicle_id}")
            if seg.length < 1:
                raise ValueError("idle segment length must be >= 1 second")
            if not (-90.0 <= seg.latitude <= 90.0 and -180.0 <= seg.longitude <= 180.0):
                raise ValueError("idle segment coordinates outside WGS84 bounds")
            per_vehicle.setdefault(seg.vehicle_id, []).append(seg)
        for vid, segs in per_vehicle.items():
            segs.sort(key=lambda s: s.start)
            for older, newer in zip(segs, segs[1:]):
                if newer.start <= older.end:
                    raise ValueError(f"{vid}: overlapping idle segments")
        object.__setattr__(self, "_segments_by_vehicle", per_vehicle)

    def segments_for(self, vehicle_id: str) -> "list[IdleSegment]":
        return self._segments_by_vehicle.get(vehicle_id, [])

    def position(self, vehicle: SimVehicle, t: float) -> tuple[float, float]:
        """Float32-quantized (latitude, longitude) of ``vehicle`` at script
        time ``t``, after snapping ``t`` down to the script's update grid."""
        t = (int(t) // self.tick) * self.tick
        for seg in self.segments_for(vehicle.vehicle_id):
            if seg.covers(t):
                return _f32(seg.latitude), _f32(seg.longitude)
        points = vehicle.waypoints
        times = [w[0] for w in points]
        i = bisect_right(times, t)
        if i == 0:
            _, lat, lon = points[0]
        elif i == len(points):
            _, lat, lon = points[-1]
        else:
            t0, lat0, lon0 = points[i - 1]
            t1, lat1, lon1 = points[i]
            frac = (t - t0) / (t1 - t0) if t1 > t0 else 0.0
            lat = lat0 + frac * (lat1 - lat0)
            lon = lon0 + frac * (lon1 - lon0)
        return _f32(lat), _f32(lon)


# ---------------------------------------------------------------------------
# Script file round-trip


def save_script(script: FleetScript, path: "str | Path") -> None:
    doc = {
        "iata_id": script.iata_id,
        "seed": script.seed,
        "tick": script.tick,
        "vehicles": [
            {"vehicle_id": v.vehicle_id, "route_id": v.route_id,
             "trip_id": v.trip_id,
             "waypoints": [list(w) for w in v.waypoints]}
            for v in script.vehicles
        ],
        "idle_segments": [
            {"vehicle_id": s.vehicle_id, "start": s.start, "length": s.length,
             "latitude": s.latitude, "longitude": s.longitude}
            for s in script.idle_segments
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def load_script(path: "str | Path") -> FleetScript:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    vehicles = tuple(
        SimVehicle(vehicle_id=v["vehicle_id"], route_id=v.get("route_id"),
                   trip_id=v.get("trip_id"),
                   waypoints=tuple(tuple(w) for w in v["waypoints"]))
        for v in doc["vehicles"])
    segments = tuple(
        IdleSegment(vehicle_id=s["vehicle_id"], start=s["start"],
                    length=s["length"], latitude=s["latitude"],
                    longitude=s["longitude"])
        for s in doc.get("idle_segments", ()))
    return FleetScript(iata_id=doc["iata_id"], seed=doc.get("seed", 0),
                       tick=doc["tick"], vehicles=vehicles,
                       idle_segments=segments)


# ---------------------------------------------------------------------------
# Feed construction


def feed_entities(script: FleetScript, script_time: float,
                  wall_time: int) -> "list[VehicleEntity]":
    entities = []
    for vehicle in script.vehicles:
        lat, lon = script.position(vehicle, script_time)
        entities.append(VehicleEntity(
            entity_id=vehicle.vehicle_id, vehicle_id=vehicle.vehicle_id,
            trip_id=vehicle.trip_id, route_id=vehicle.route_id,
            latitude=lat, longitude=lon, timestamp=wall_time))
    return entities


def feed_bytes(script: FleetScript, script_time: float, wall_time: int) -> bytes:
    """Binary FeedMessage of the whole fleet at one instant."""
    return build_feed(timestamp=wall_time,
                      entities=feed_entities(script, script_time, wall_time))


def script_snapshot(script: FleetScript, poll_time: int, epoch: int = 0,
                    region_id: str = "sim") -> FeedSnapshot:
    """Snapshot as the extractor would produce it, without the wire hop."""
    records = [
        VehicleRecord(iata_id=script.iata_id, vehicle_id=e.vehicle_id,
                      route_id=e.route_id, trip_id=e.trip_id,
                      latitude=e.latitude, longitude=e.longitude,
                      timestamp=e.timestamp)
        for e in feed_entities(script, poll_time - epoch, poll_time)
    ]
    return FeedSnapshot.from_records(region_id, poll_time, records)


class ScriptFeedServer:
    """Serves the script as a live GTFS Realtime endpoint over HTTP GET.

    The clock is injectable so integration tests can run compressed time;
    script time zero is pinned to ``epoch`` (default: server start).
    """

    def __init__(self, script: FleetScript, host: str = "127.0.0.1",
                 port: int = 0, clock: Callable[[], float] = time.time,
                 epoch: Optional[float] = None):
        self.script = script
        self.host = host
        self._requested_port = port
        self.clock = clock
        self.epoch = epoch
        self._server: Optional[asyncio.AbstractServer] = None

    async def start(self) -> None:
        if self.epoch is None:
            self.epoch = self.clock()
        try:
            self._server = await asyncio.start_server(
                self._handle, self.host, self._requested_port)
        except OSError as exc:
            raise BindFailure(
                f"cannot bind {self.host}:{self._requested_port}: {exc}") from exc

    @property
    def port(self) -> int:
        assert self._server is not None, "server not started"
        return self._server.sockets[0].getsockname()[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}/"

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _handle(self, reader: asyncio.StreamReader,
                      writer: asyncio.StreamWriter) -> None:
        try:
            try:
                method, _path, _headers = await read_request_head(reader)
            except BadRequest:
                writer.write(simple_response(400, "Bad Request"))
                return
            if method != "GET":
                writer.write(simple_response(405, "Method Not Allowed"))
                return
            now = self.clock()
            payload = feed_bytes(self.script, now - self.epoch, int(now))
            writer.write(simple_response(200, "OK", payload,
                                         content_type="application/octet-stream"))
            await writer.drain()
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass


# ---------------------------------------------------------------------------
# Ground-truth oracle


def oracle_events(script: FleetScript, params: DetectorParams,
                  poll_times: Sequence[int], epoch: int = 0,
                  ) -> "list[list[IdlingEvent]]":
    """Expected idling events per poll, derived directly from the script.

    For each vehicle, scan its per-poll attribute tuples for maximal runs
    of unchanged values; a run of at least h+2 polls yields one event per
    poll from the (h+2)th onward, with durations climbing the ladder
    (h+1)*r, +r, +r, ... and the start time pinned to the run's first poll.

    Returns one (possibly empty) batch per entry of ``poll_times``; the
    first h+1 batches are empty by construction.
    """
    batches: "list[list[IdlingEvent]]" = [[] for _ in poll_times]
    for vehicle in script.vehicles:
        tuples = [script.position(vehicle, t - epoch) for t in poll_times]
        i = 0
        while i < len(tuples):
            j = i
            while j + 1 < len(tuples) and tuples[j + 1] == tuples[i]:
                j += 1
            run_length = j - i + 1
            if run_length >= params.h + 2:
                lat, lon = tuples[i]
                for k in range(i + params.h + 1, j + 1):
                    batches[k].append(IdlingEvent(
                        iata_id=script.iata_id,
                        vehicle_id=vehicle.vehicle_id,
                        route_id=vehicle.route_id,
                        trip_id=vehicle.trip_id,
                        latitude=lat, longitude=lon,
                        datetime=poll_times[i],
                        duration=params.min_duration
                        + (k - (i + params.h + 1)) * params.r,
                    ))
            i = j + 1
    for batch in batches:
        batch.sort(key=lambda e: (e.iata_id, e.vehicle_id))
    return batches


# ---------------------------------------------------------------------------
# Random script generation for fuzz and acceptance runs


def random_script(seed: int, max_vehicles: int = 50, max_ticks: int = 200,
                  r: int = 30, iata_id: str = "SIM") -> FleetScript:
    """A reproducible random fleet with idle segments.

    Vehicles drift monotonically between two waypoints so consecutive
    polls never repeat a position outside idle segments; segment
    positions are drawn independently of the drift path, so a tuple never
    recurs once its run is broken. Both properties keep the detector's
    candidate persistence (which tolerates recurring tuples) observationally
    equal to the oracle's plain run scan.
    """
    rng = random.Random(seed)
    n_vehicles = rng.randint(1, max_vehicles)
    n_ticks = rng.randint(8, max_ticks)
    horizon = (n_ticks - 1) * r
    vehicles = []
    segments = []
    for index in range(n_vehicles):
        vid = f"bus-{index:03d}"
        route = f"route-{rng.randint(1, 25)}"
        trip = f"trip-{index:03d}-{rng.randint(100, 999)}"
        lat0 = rng.uniform(40.2, 40.9)
        lon0 = rng.uniform(-74.4, -73.6)
        lat_rate = rng.uniform(1e-5, 4e-5) * rng.choice((-1.0, 1.0))
        lon_rate = rng.uniform(1e-5, 4e-5) * rng.choice((-1.0, 1.0))
        vehicles.append(SimVehicle(
            vehicle_id=vid, route_id=route, trip_id=trip,
            waypoints=((0, lat0, lon0),
                       (max(horizon, 1), lat0 + lat_rate * max(horizon, 1),
                        lon0 + lon_rate * max(horizon, 1)))))
        cursor = 0
        for _ in range(rng.randint(0, 3)):
            if cursor >= horizon - r:
                break
            start = rng.randint(cursor, horizon - r)
            length = rng.randint(r, min(12 * r, max(r, horizon - start)))
            segments.append(IdleSegment(
                vehicle_id=vid, start=start, length=length,
                latitude=rng.uniform(40.2, 40.9),
                longitude=rng.uniform(-74.4, -73.6)))
            cursor = start + length + 1
    return FleetScript(iata_id=iata_id, seed=seed, tick=r,
                       vehicles=tuple(vehicles), idle_segments=tuple(segments))

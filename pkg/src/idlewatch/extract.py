"""Feed extraction: poll GTFS Realtime endpoints per region and merge each
tick's results into a single snapshot.

Each region runs one polling loop. Sources inside a region are fetched
concurrently with a per-request timeout of half the polling interval, so
one slow agency cannot stall the regional tick. A failing source
contributes zero records to that tick and is recorded in the snapshot's
``fetch_errors``; it never aborts the stream.
"""

from __future__ import annotations

import asyncio
import logging
import time
from collections import Counter
from dataclasses import dataclass
from typing import AsyncIterator, Awaitable, Callable, Optional, Sequence

import httpx

from .gtfsrt import MalformedPayload, parse_feed
from .model import FeedSnapshot, IATA_PATTERN, RejectReason, VehicleRecord, validate_record

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SourceConfig:
    """One GTFS Realtime endpoint and the fleet identity stamped on its records.

    ``iata_id`` is assigned here by configuration; the feed itself carries
    no such field. ``auth_header``/``auth_secret`` form an optional static
    request header (e.g. an API key).
    """

    region_id: str
    endpoint_url: str
    iata_id: str
    auth_header: Optional[str] = None
    auth_secret: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.region_id:
            raise ValueError("region_id must be non-empty")
        if not self.endpoint_url:
            raise ValueError("endpoint_url must be non-empty")
        if not IATA_PATTERN.match(self.iata_id):
            raise ValueError(
                f"iata_id must be a three-letter uppercase code, got {self.iata_id!r}")

    def headers(self) -> dict:
        if self.auth_header and self.auth_secret is not None:
            return {self.auth_header: self.auth_secret}
        return {}


@dataclass(frozen=True)
class DecodeResult:
    """Validated records from one payload plus counts of rejected entities."""

    records: tuple
    dropped: "Counter[RejectReason]"

    @property
    def dropped_total(self) -> int:
        return sum(self.dropped.values())


def decode_feed(payload: bytes, iata_id: str, fallback_time: int) -> DecodeResult:
    """Deserialize one binary FeedMessage into validated vehicle records.

    One record is produced per entity carrying a vehicle position. The
    record timestamp is the per-entity timestamp when present, else the
    feed header timestamp, else ``fallback_time`` (header time bounds
    entity staleness). Entities failing validation are dropped and counted
    by reason.

    Raises MalformedPayload when the protobuf envelope cannot be parsed,
    which signals a skipped poll rather than a crash.
    """
    feed = parse_feed(payload)
    records: list[VehicleRecord] = []
    dropped: Counter = Counter()
    for entity in feed.vehicles:
        if not entity.has_position:
            continue
        timestamp = entity.timestamp or feed.header.timestamp or fallback_time
        rec = VehicleRecord(
            iata_id=iata_id,
            vehicle_id=entity.vehicle_id,
            route_id=entity.route_id,
            trip_id=entity.trip_id,
            latitude=entity.latitude,
            longitude=entity.longitude,
            timestamp=int(timestamp),
        )
        outcome = validate_record(rec)
        if isinstance(outcome, RejectReason):
            dropped[outcome] += 1
        else:
            records.append(outcome)
    return DecodeResult(records=tuple(records), dropped=dropped)


class RegionPoller:
    """Polls all sources of one region at a fixed interval.

    Ticks are spaced ``r`` seconds apart measured start-to-start. The
    clock and sleep are injectable so tests can run compressed time.
    """

    def __init__(self, sources: Sequence[SourceConfig], r: int,
                 client: Optional[httpx.AsyncClient] = None,
                 clock: Callable[[], float] = time.time,
                 sleep: Callable[[float], Awaitable[None]] = asyncio.sleep):
        if r < 1:
            raise ValueError("poll interval r must be >= 1 second")
        if not sources:
            raise ValueError("a region needs at least one source")
        regions = {s.region_id for s in sources}
        if len(regions) != 1:
            raise ValueError(f"sources span multiple regions: {sorted(regions)}")
        self.region_id = sources[0].region_id
        self.sources = list(sources)
        self.r = r
        self._client = client
        self._owns_client = client is None
        self.clock = clock
        self.sleep = sleep

    async def _fetch_one(self, client: httpx.AsyncClient, source: SourceConfig,
                         poll_time: int) -> "tuple[tuple, tuple]":
        """Returns (records, errors) for one source; never raises."""
        try:
            response = await client.get(source.endpoint_url,
                                        headers=source.headers(),
                                        timeout=self.r / 2)
            response.raise_for_status()
            result = decode_feed(response.content, source.iata_id, poll_time)
            if result.dropped_total:
                logger.warning("%s: dropped %d invalid entities from %s (%s)",
                               self.region_id, result.dropped_total,
                               source.endpoint_url, dict(result.dropped))
            return result.records, ()
        except MalformedPayload as exc:
            logger.warning("%s: malformed payload from %s: %s",
                           self.region_id, source.endpoint_url, exc)
            return (), ((source.endpoint_url, f"malformed payload: {exc}"),)
        except (httpx.HTTPError, OSError) as exc:
            logger.warning("%s: fetch failed for %s: %s",
                           self.region_id, source.endpoint_url, exc)
            return (), ((source.endpoint_url, f"{type(exc).__name__}: {exc}"),)

    async def poll_once(self, client: httpx.AsyncClient) -> FeedSnapshot:
        """One tick: fetch every source concurrently and merge."""
        poll_time = int(self.clock())
        results = await asyncio.gather(
            *(self._fetch_one(client, src, poll_time) for src in self.sources))
        records: list[VehicleRecord] = []
        errors: list = []
        for recs, errs in results:
            records.extend(recs)
            errors.extend(errs)
        return FeedSnapshot.from_records(self.region_id, poll_time, records,
                                         fetch_errors=tuple(errors))

    async def snapshots(self) -> AsyncIterator[FeedSnapshot]:
        """Endless stream of one snapshot per tick."""
        client = self._client or httpx.AsyncClient()
        try:
            while True:
                started = self.clock()
                yield await self.poll_once(client)
                elapsed = self.clock() - started
                await self.sleep(max(0.0, self.r - elapsed))
        finally:
            if self._owns_client:
                await client.aclose()

"""Idling detection over a rolling window of feed snapshots.

The detector holds the last h+2 snapshots of one region. On every tick it
takes the oldest slot as set A, slot h as set B, and the newest slot as
set C, then:

  1. intersects A and B under exact equality of the five position
     attributes (vehicle_id, route_id, trip_id, latitude, longitude),
     keyed by (iata_id, vehicle_id) -- new matches enter the candidate
     set with their start time pinned to the A snapshot's poll time;
  2. updates each candidate's miss counter: reset to zero when its tuple
     is present in C, incremented otherwise; candidates reaching the
     eviction bound m are deleted;
  3. emits one idling event per candidate present in C, carrying the
     pinned start time and a step-counted duration
     (h+1)*r + consecutive_hits*r.

Durations are step-counted rather than wall-clock differences so an
uninterrupted episode yields the exact ladder (h+1)*r, (h+1)*r + r, ...
regardless of feed timestamp jitter.

Stationarity is exact attribute equality. A candidate is keyed by its
full attribute tuple: a vehicle that moves and re-idles elsewhere forms a
new candidate with a fresh start time.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .model import AttrTuple, DetectorParams, FeedSnapshot, IdlingEvent

logger = logging.getLogger(__name__)

#: Candidate identity: (iata_id, 5-attribute tuple).
CandidateKey = tuple[str, AttrTuple]


class OutOfOrderSnapshot(ValueError):
    """A snapshot older than the newest buffered one was pushed."""


@dataclass
class CandidateEntry:
    """Bookkeeping for one stationary tuple in the persistent set.

    ``consecutive_hits`` counts C-matches beyond the first and resets on
    a miss, so a re-observed candidate restarts its duration ladder while
    keeping its original start time.
    """

    key: tuple[str, str]
    attrs: AttrTuple
    first_stationary_at: int
    miss_count: int = 0
    consecutive_hits: int = 0


class RollingBuffer:
    """Time-ordered window of the last h+2 snapshots of one region."""

    def __init__(self, params: DetectorParams):
        self.params = params
        self.slots: "deque[FeedSnapshot]" = deque(maxlen=params.window)

    def push(self, snapshot: FeedSnapshot) -> bool:
        """Append a snapshot, evicting the oldest when full.

        Returns the readiness flag: True once the buffer holds h+2
        snapshots. Raises OutOfOrderSnapshot when the snapshot is older
        than the newest buffered one.
        """
        if self.slots and snapshot.poll_time < self.slots[-1].poll_time:
            raise OutOfOrderSnapshot(
                f"poll_time {snapshot.poll_time} precedes buffered "
                f"{self.slots[-1].poll_time}")
        self.slots.append(snapshot)
        return self.ready

    @property
    def ready(self) -> bool:
        return len(self.slots) == self.params.window

    def __len__(self) -> int:
        return len(self.slots)


def intersect_stationary(a: FeedSnapshot, b: FeedSnapshot) -> "set[CandidateKey]":
    """Tuples present in both snapshots with all five attributes equal.

    Latitude/longitude equality is exact value equality; no tolerance is
    applied.
    """
    matched: set[CandidateKey] = set()
    for key, rec in a.records.items():
        other = b.records.get(key)
        if other is not None and rec.attrs == other.attrs:
            matched.add((rec.iata_id, rec.attrs))
    return matched


class IdlingDetector:
    """Stateful per-region detector: push snapshots, collect event batches.

    The state transition is deterministic and free of wall-clock reads, so
    identical snapshot streams replay to identical event streams.
    """

    def __init__(self, params: Optional[DetectorParams] = None):
        self.params = params or DetectorParams()
        self.buffer = RollingBuffer(self.params)
        self.candidates: "dict[CandidateKey, CandidateEntry]" = {}

    def push(self, snapshot: FeedSnapshot) -> "list[IdlingEvent] | None":
        """Advance one tick.

        Returns None while the buffer is warming up, otherwise the
        (possibly empty) batch of idling events for this tick.
        """
        if not self.buffer.push(snapshot):
            return None
        return self._step()

    def _step(self) -> "list[IdlingEvent]":
        params = self.params
        slots = self.buffer.slots
        a, b, c = slots[0], slots[params.h], slots[params.h + 1]

        for iata_id, attrs in intersect_stationary(a, b):
            key = (iata_id, attrs)
            if key not in self.candidates:
                # Start time pins to the oldest snapshot of the first
                # matched pair; later re-matches keep the earliest.
                self.candidates[key] = CandidateEntry(
                    key=(iata_id, attrs[0]), attrs=attrs,
                    first_stationary_at=a.poll_time)

        present_in_c = {(rec.iata_id, rec.attrs) for rec in c.records.values()}
        events: list[IdlingEvent] = []
        for key, entry in list(self.candidates.items()):
            if key in present_in_c:
                entry.miss_count = 0
                events.append(IdlingEvent(
                    iata_id=key[0],
                    vehicle_id=entry.attrs[0],
                    route_id=entry.attrs[1],
                    trip_id=entry.attrs[2],
                    latitude=entry.attrs[3],
                    longitude=entry.attrs[4],
                    datetime=entry.first_stationary_at,
                    duration=params.min_duration + entry.consecutive_hits * params.r,
                ))
                entry.consecutive_hits += 1
            else:
                entry.miss_count += 1
                entry.consecutive_hits = 0
                if entry.miss_count >= params.m:
                    del self.candidates[key]
        events.sort(key=lambda e: (e.iata_id, e.vehicle_id))
        return events


def run_detector(snapshots: Iterable[FeedSnapshot],
                 params: Optional[DetectorParams] = None,
                 ) -> Iterator["list[IdlingEvent]"]:
    """Drive a detector over a snapshot stream, yielding one batch per tick
    after warm-up. Empty batches are yielded as empty lists; an
    out-of-order snapshot is skipped with a warning and yields nothing.
    """
    detector = IdlingDetector(params)
    for snapshot in snapshots:
        try:
            batch = detector.push(snapshot)
        except OutOfOrderSnapshot as exc:
            logger.warning("%s: skipping out-of-order snapshot: %s",
                           snapshot.region_id, exc)
            continue
        if batch is not None:
            yield batch

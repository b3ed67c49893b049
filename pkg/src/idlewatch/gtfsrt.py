"""Minimal GTFS Realtime protobuf wire codec.

Transit agencies publish vehicle positions as binary Protocol Buffer
``FeedMessage`` payloads. This module reads and writes the subset of that
schema needed for idling detection: the feed header plus, per entity, the
vehicle descriptor, trip descriptor, position, and timestamp. All other
fields (bearing, occupancy, stop status, trip updates, alerts, ...) are
skipped on decode, which keeps the reader robust against the full variety
of live feeds.

Field numbers follow the published gtfs-realtime.proto:

    FeedMessage:      header=1, entity=2
    FeedHeader:       gtfs_realtime_version=1, incrementality=2, timestamp=3
    FeedEntity:       id=1, is_deleted=2, trip_update=3, vehicle=4, alert=5
    VehiclePosition:  trip=1, position=2, current_stop_sequence=3,
                      current_status=4, timestamp=5, congestion_level=6,
                      stop_id=7, vehicle=8, occupancy_status=9
    TripDescriptor:   trip_id=1, start_time=2, start_date=3,
                      schedule_relationship=4, route_id=5, direction_id=6
    VehicleDescriptor: id=1, label=2, license_plate=3
    Position:         latitude=1, longitude=2, bearing=3, odometer=4, speed=5

Latitude and longitude are 32-bit floats on the wire; decoding widens them
to Python floats holding the exact float32 value, which is the precision
the feed delivers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

WIRE_VARINT = 0
WIRE_I64 = 1
WIRE_LEN = 2
WIRE_I32 = 5


class MalformedPayload(ValueError):
    """The byte payload is not a parseable FeedMessage envelope."""


# ---------------------------------------------------------------------------
# Low-level wire primitives


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint fields here are unsigned")
    out = bytearray()
    while True:
        bits = value & 0x7F
        value >>= 7
        if value:
            out.append(bits | 0x80)
        else:
            out.append(bits)
            return bytes(out)


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise MalformedPayload("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift >= 70:
            raise MalformedPayload("varint too long")


def encode_tag(field_no: int, wire_type: int) -> bytes:
    return encode_varint((field_no << 3) | wire_type)


def encode_string(field_no: int, value: str) -> bytes:
    raw = value.encode("utf-8")
    return encode_tag(field_no, WIRE_LEN) + encode_varint(len(raw)) + raw


def encode_uint(field_no: int, value: int) -> bytes:
    return encode_tag(field_no, WIRE_VARINT) + encode_varint(value)


def encode_float(field_no: int, value: float) -> bytes:
    return encode_tag(field_no, WIRE_I32) + struct.pack("<f", value)


def encode_submessage(field_no: int, payload: bytes) -> bytes:
    return encode_tag(field_no, WIRE_LEN) + encode_varint(len(payload)) + payload


def iter_fields(buf: bytes) -> Iterator[tuple[int, int, "int | bytes"]]:
    """Yield (field_number, wire_type, value) triples from a message body.

    Length-delimited values are yielded as bytes; varint/fixed values as
    ints (fixed32/fixed64 as their raw little-endian unsigned integer).
    Unknown fields are the caller's to skip: everything is yielded.
    """
    pos = 0
    while pos < len(buf):
        tag, pos = decode_varint(buf, pos)
        field_no, wire_type = tag >> 3, tag & 0x07
        if field_no == 0:
            raise MalformedPayload("field number 0")
        if wire_type == WIRE_VARINT:
            value, pos = decode_varint(buf, pos)
        elif wire_type == WIRE_I64:
            if pos + 8 > len(buf):
                raise MalformedPayload("truncated fixed64")
            value = int.from_bytes(buf[pos:pos + 8], "little")
            pos += 8
        elif wire_type == WIRE_LEN:
            length, pos = decode_varint(buf, pos)
            if pos + length > len(buf):
                raise MalformedPayload("truncated length-delimited field")
            value = buf[pos:pos + length]
            pos += length
        elif wire_type == WIRE_I32:
            if pos + 4 > len(buf):
                raise MalformedPayload("truncated fixed32")
            value = int.from_bytes(buf[pos:pos + 4], "little")
            pos += 4
        else:
            raise MalformedPayload(f"unsupported wire type {wire_type}")
        yield field_no, wire_type, value


def _as_float32(raw: int) -> float:
    return struct.unpack("<f", raw.to_bytes(4, "little"))[0]


def _as_text(value: "int | bytes", what: str) -> str:
    if not isinstance(value, bytes):
        raise MalformedPayload(f"{what} is not length-delimited")
    try:
        return value.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedPayload(f"{what} is not valid UTF-8") from exc


def _as_bytes(value: "int | bytes", what: str) -> bytes:
    if not isinstance(value, bytes):
        raise MalformedPayload(f"{what} is not a submessage")
    return value


# ---------------------------------------------------------------------------
# GTFS Realtime message structures (decoded view)


@dataclass(frozen=True)
class FeedHeader:
    version: str = ""
    incrementality: int = 0
    timestamp: int = 0


@dataclass(frozen=True)
class VehicleEntity:
    """The decoded position-bearing part of one feed entity."""

    entity_id: str = ""
    vehicle_id: str = ""
    trip_id: Optional[str] = None
    route_id: Optional[str] = None
    latitude: Optional[float] = None
    longitude: Optional[float] = None
    timestamp: int = 0

    @property
    def has_position(self) -> bool:
        return self.latitude is not None and self.longitude is not None


@dataclass(frozen=True)
class Feed:
    header: FeedHeader = FeedHeader()
    vehicles: tuple = field(default_factory=tuple)


def _parse_header(body: bytes) -> FeedHeader:
    version, incrementality, timestamp = "", 0, 0
    for field_no, _, value in iter_fields(body):
        if field_no == 1:
            version = _as_text(value, "gtfs_realtime_version")
        elif field_no == 2 and isinstance(value, int):
            incrementality = value
        elif field_no == 3 and isinstance(value, int):
            timestamp = value
    return FeedHeader(version=version, incrementality=incrementality,
                      timestamp=timestamp)


def _parse_trip(body: bytes) -> tuple[Optional[str], Optional[str]]:
    trip_id, route_id = None, None
    for field_no, _, value in iter_fields(body):
        if field_no == 1:
            trip_id = _as_text(value, "trip_id")
        elif field_no == 5:
            route_id = _as_text(value, "route_id")
    return trip_id, route_id


def _parse_position(body: bytes) -> tuple[Optional[float], Optional[float]]:
    latitude, longitude = None, None
    for field_no, wire_type, value in iter_fields(body):
        if field_no == 1 and wire_type == WIRE_I32:
            latitude = _as_float32(value)
        elif field_no == 2 and wire_type == WIRE_I32:
            longitude = _as_float32(value)
    return latitude, longitude


def _parse_vehicle_descriptor(body: bytes) -> str:
    for field_no, _, value in iter_fields(body):
        if field_no == 1:
            return _as_text(value, "vehicle descriptor id")
    return ""


def _parse_vehicle_position(entity_id: str, body: bytes) -> VehicleEntity:
    vehicle_id = ""
    trip_id = route_id = None
    latitude = longitude = None
    timestamp = 0
    for field_no, _, value in iter_fields(body):
        if field_no == 1:
            trip_id, route_id = _parse_trip(_as_bytes(value, "trip"))
        elif field_no == 2:
            latitude, longitude = _parse_position(_as_bytes(value, "position"))
        elif field_no == 5 and isinstance(value, int):
            timestamp = value
        elif field_no == 8:
            vehicle_id = _parse_vehicle_descriptor(_as_bytes(value, "vehicle"))
    # Feeds that omit the vehicle descriptor conventionally reuse the
    # entity id as the vehicle identity.
    return VehicleEntity(entity_id=entity_id, vehicle_id=vehicle_id or entity_id,
                         trip_id=trip_id, route_id=route_id,
                         latitude=latitude, longitude=longitude,
                         timestamp=timestamp)


def _parse_entity(body: bytes) -> Optional[VehicleEntity]:
    entity_id = ""
    vehicle_body = None
    for field_no, _, value in iter_fields(body):
        if field_no == 1:
            entity_id = _as_text(value, "entity id")
        elif field_no == 4:
            vehicle_body = _as_bytes(value, "vehicle position")
    if vehicle_body is None:
        return None
    return _parse_vehicle_position(entity_id, vehicle_body)


def parse_feed(payload: bytes) -> Feed:
    """Decode a binary FeedMessage.

    Entities without a VehiclePosition (trip updates, alerts) are ignored.
    Raises :class:`MalformedPayload` when the envelope cannot be parsed.
    """
    if not isinstance(payload, (bytes, bytearray, memoryview)):
        raise MalformedPayload("payload is not bytes")
    header = FeedHeader()
    vehicles: list[VehicleEntity] = []
    for field_no, _, value in iter_fields(bytes(payload)):
        if field_no == 1:
            header = _parse_header(_as_bytes(value, "header"))
        elif field_no == 2:
            entity = _parse_entity(_as_bytes(value, "entity"))
            if entity is not None:
                vehicles.append(entity)
    return Feed(header=header, vehicles=tuple(vehicles))


# ---------------------------------------------------------------------------
# Encoding (used by the fleet simulator and test fixtures)


def build_vehicle_entity(entity: VehicleEntity) -> bytes:
    trip = b""
    if entity.trip_id is not None:
        trip += encode_string(1, entity.trip_id)
    if entity.route_id is not None:
        trip += encode_string(5, entity.route_id)
    position = (encode_float(1, entity.latitude or 0.0)
                + encode_float(2, entity.longitude or 0.0))
    vehicle = b""
    if trip:
        vehicle += encode_submessage(1, trip)
    vehicle += encode_submessage(2, position)
    if entity.timestamp:
        vehicle += encode_uint(5, entity.timestamp)
    if entity.vehicle_id:
        vehicle += encode_submessage(8, encode_string(1, entity.vehicle_id))
    return (encode_string(1, entity.entity_id or entity.vehicle_id)
            + encode_submessage(4, vehicle))


def build_feed(timestamp: int, entities: "list[VehicleEntity]",
               version: str = "2.0", incrementality: int = 0) -> bytes:
    """Serialize a FeedMessage carrying the given vehicle entities."""
    header = encode_string(1, version)
    header += encode_uint(2, incrementality)
    if timestamp:
        header += encode_uint(3, timestamp)
    out = encode_submessage(1, header)
    for entity in entities:
        out += encode_submessage(2, build_vehicle_entity(entity))
    return out

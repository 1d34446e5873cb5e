"""Order-preserving byte encoding for composite keys and tuple values.

Encoded keys compare bytewise exactly like the field tuples they encode
(honoring per-field descending flags), and encoding a prefix of the fields
yields a byte prefix of the full key. Those two properties are what let
equality-prefix + single-range predicates run as one contiguous range scan
against the ordered key/value store.

Layout per field:
  int64/timestamp  8 bytes big-endian with the sign bit flipped
  boolean          1 byte (0x00 / 0x01)
  string           UTF-8 with 0x00 -> 0x01 0x01 and 0x01 -> 0x01 0x02,
                   terminated by 0x00 (the terminator is the only 0x00
                   byte in the field, so decoding is unambiguous)

Descending fields are bytewise complemented, terminator included.
"""

from __future__ import annotations

import struct

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1

_SIGN_FLIP = 1 << 63

COLUMN_TYPES = ("int64", "string", "boolean", "timestamp")


class KeyCodecError(ValueError):
    """Value does not match the declared field type or range."""


def _complement(data: bytes) -> bytes:
    return bytes(0xFF - b for b in data)


def encode_value(col_type: str, value, descending: bool = False) -> bytes:
    """Encode one field. Raises KeyCodecError on a type mismatch."""
    if col_type in ("int64", "timestamp"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise KeyCodecError(f"expected int for {col_type}, got {value!r}")
        if not INT64_MIN <= value <= INT64_MAX:
            raise KeyCodecError(f"{value} out of int64 range")
        raw = struct.pack(">Q", (value + _SIGN_FLIP) & 0xFFFFFFFFFFFFFFFF)
    elif col_type == "boolean":
        if not isinstance(value, bool):
            raise KeyCodecError(f"expected bool, got {value!r}")
        raw = b"\x01" if value else b"\x00"
    elif col_type == "string":
        if not isinstance(value, str):
            raise KeyCodecError(f"expected str, got {value!r}")
        encoded = value.encode("utf-8")
        encoded = encoded.replace(b"\x01", b"\x01\x02").replace(b"\x00", b"\x01\x01")
        raw = encoded + b"\x00"
    else:
        raise KeyCodecError(f"unknown column type {col_type!r}")
    return _complement(raw) if descending else raw


def decode_value(col_type: str, data: bytes, offset: int, descending: bool = False):
    """Decode one field starting at `offset`; returns (value, next offset)."""
    if col_type in ("int64", "timestamp"):
        chunk = data[offset : offset + 8]
        if len(chunk) != 8:
            raise KeyCodecError("truncated integer field")
        if descending:
            chunk = _complement(chunk)
        (unsigned,) = struct.unpack(">Q", chunk)
        return unsigned - _SIGN_FLIP, offset + 8
    if col_type == "boolean":
        if offset >= len(data):
            raise KeyCodecError("truncated boolean field")
        byte = data[offset] ^ (0xFF if descending else 0x00)
        return byte != 0, offset + 1
    if col_type == "string":
        terminator = 0xFF if descending else 0x00
        end = data.find(bytes([terminator]), offset)
        if end < 0:
            raise KeyCodecError("unterminated string field")
        raw = data[offset:end]
        if descending:
            raw = _complement(raw)
        raw = raw.replace(b"\x01\x01", b"\x00").replace(b"\x01\x02", b"\x01")
        return raw.decode("utf-8"), end + 1
    raise KeyCodecError(f"unknown column type {col_type!r}")


def encode_key(fields) -> bytes:
    """Encode a sequence of (col_type, value, descending) triples."""
    return b"".join(encode_value(t, v, d) for t, v, d in fields)


def decode_key(data: bytes, layout) -> list:
    """Decode per a (col_type, descending) layout; rejects trailing bytes."""
    values = []
    offset = 0
    for col_type, descending in layout:
        value, offset = decode_value(col_type, data, offset, descending)
        values.append(value)
    if offset != len(data):
        raise KeyCodecError("trailing bytes after decoded key")
    return values


def increment_bytes(data: bytes) -> bytes | None:
    """Least byte string greater than every string prefixed by `data`.

    Returns None when no such string exists (all 0xFF), meaning +infinity.
    """
    out = bytearray(data)
    while out:
        if out[-1] != 0xFF:
            out[-1] += 1
            return bytes(out)
        out.pop()
    return None


def successor_bytes(data: bytes) -> bytes:
    """Immediate successor of `data` in byte order."""
    return data + b"\x00"


# Tuple (record) values: each field length-prefixed so heterogeneous rows
# decode without scanning. Strings are capped far below 2**16.

def encode_record(col_types, values) -> bytes:
    if len(col_types) != len(values):
        raise KeyCodecError("column/value count mismatch")
    parts = []
    for col_type, value in zip(col_types, values):
        enc = encode_value(col_type, value, descending=False)
        if len(enc) > 0xFFFF:
            raise KeyCodecError("field too large to serialize")
        parts.append(struct.pack(">H", len(enc)))
        parts.append(enc)
    return b"".join(parts)


def decode_record(col_types, data: bytes) -> list:
    values = []
    offset = 0
    for col_type in col_types:
        if offset + 2 > len(data):
            raise KeyCodecError("truncated record")
        (length,) = struct.unpack_from(">H", data, offset)
        offset += 2
        value, end = decode_value(col_type, data[offset : offset + length], 0)
        if end != length:
            raise KeyCodecError("record field length mismatch")
        values.append(value)
        offset += length
    if offset != len(data):
        raise KeyCodecError("trailing bytes after decoded record")
    return values

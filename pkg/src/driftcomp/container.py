"""Tiny versioned binary container: magic, JSON header, payload, CRC.

Layout (all integers little-endian):

    bytes 0..7    magic (8 ASCII bytes, ends in a version digit)
    bytes 8..11   u32 header length
    header        UTF-8 JSON, sorted keys, compact separators
    payload       concatenated blobs; the header carries offsets/lengths

The header stores ``payload_crc32`` so a single corrupted byte is caught
and reported with the file name. Writers must not embed wall-clock data:
identical inputs must produce identical bytes.
"""

import json
import struct
import zlib

from .errors import FormatError


def dumps_header(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: str, magic: bytes, header: dict, payload: bytes) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    header = dict(header)
    header["payload_crc32"] = zlib.crc32(payload)
    blob = dumps_header(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_container(path: str, magic: bytes) -> tuple:
    """Returns (header dict, payload bytes); verifies magic and CRC."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != magic:
        raise FormatError(f"{path}: not a {magic.decode('ascii', 'replace')} container")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header (wants {hlen} bytes)")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[12 + hlen :]
    expect = header.get("payload_crc32")
    actual = zlib.crc32(payload)
    if expect != actual:
        raise FormatError(f"{path}: payload CRC mismatch (expected {expect}, got {actual})")
    return header, payload


class BlobWriter:
    """Accumulates payload blobs, handing back (offset, length) records."""

    def __init__(self):
        self.parts = []
        self.offset = 0

    def add(self, data: bytes) -> dict:
        rec = {"offset": self.offset, "length": len(data)}
        self.parts.append(data)
        self.offset += len(data)
        return rec

    def payload(self) -> bytes:
        return b"".join(self.parts)


def read_blob(payload: bytes, rec: dict, path: str = "<container>") -> bytes:
    off, length = rec["offset"], rec["length"]
    if off + length > len(payload):
        raise FormatError(f"{path}: blob at {off}+{length} exceeds payload size {len(payload)}")
    return payload[off : off + length]

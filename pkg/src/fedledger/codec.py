"""Canonical binary encoding used for every hashed, signed, or persisted byte.

All structures that feed a digest or a signature are serialized exactly once,
here. The encoding is length-prefixed and field-ordered: integers are 8-byte
big-endian two's complement, byte strings carry a 4-byte big-endian length,
and maps are emitted with keys in sorted order. Identical inputs therefore
produce identical bytes on any platform.
"""

from __future__ import annotations

import struct
from typing import Any

TAG_NONE = 0x00
TAG_INT = 0x01
TAG_STR = 0x02
TAG_BYTES = 0x03
TAG_LIST = 0x04
TAG_MAP = 0x05
TAG_BOOL = 0x06


class CodecError(ValueError):
    pass


def enc_u32(n: int) -> bytes:
    return struct.pack(">I", n)


def enc_i64(n: int) -> bytes:
    return struct.pack(">q", n)


def enc_bytes(b: bytes) -> bytes:
    return enc_u32(len(b)) + b


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


def encode_value(value: Any) -> bytes:
    """Encode a JSON-like value (None, bool, int, str, bytes, list, dict)."""
    if value is None:
        return bytes([TAG_NONE])
    # bool before int: bool is an int subclass
    if isinstance(value, bool):
        return bytes([TAG_BOOL, 1 if value else 0])
    if isinstance(value, int):
        return bytes([TAG_INT]) + enc_i64(value)
    if isinstance(value, str):
        return bytes([TAG_STR]) + enc_str(value)
    if isinstance(value, (bytes, bytearray)):
        return bytes([TAG_BYTES]) + enc_bytes(bytes(value))
    if isinstance(value, (list, tuple)):
        out = bytes([TAG_LIST]) + enc_u32(len(value))
        for item in value:
            out += encode_value(item)
        return out
    if isinstance(value, dict):
        keys = sorted(value.keys())
        out = bytes([TAG_MAP]) + enc_u32(len(keys))
        for k in keys:
            if not isinstance(k, str):
                raise CodecError(f"map keys must be strings, got {type(k).__name__}")
            out += enc_str(k) + encode_value(value[k])
        return out
    raise CodecError(f"cannot encode {type(value).__name__}")


class Reader:
    """Sequential decoder over a bytes buffer; raises CodecError on underrun."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CodecError("buffer underrun")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def read_u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def read_i64(self) -> int:
        return struct.unpack(">q", self._take(8))[0]

    def read_bytes(self) -> bytes:
        return self._take(self.read_u32())

    def read_str(self) -> str:
        raw = self.read_bytes()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError("invalid utf-8") from exc

    def read_value(self) -> Any:
        tag = self._take(1)[0]
        if tag == TAG_NONE:
            return None
        if tag == TAG_BOOL:
            return self._take(1)[0] != 0
        if tag == TAG_INT:
            return self.read_i64()
        if tag == TAG_STR:
            return self.read_str()
        if tag == TAG_BYTES:
            return self.read_bytes()
        if tag == TAG_LIST:
            count = self.read_u32()
            return [self.read_value() for _ in range(count)]
        if tag == TAG_MAP:
            count = self.read_u32()
            out = {}
            for _ in range(count):
                key = self.read_str()
                out[key] = self.read_value()
            return out
        raise CodecError(f"unknown tag 0x{tag:02x}")

    def at_end(self) -> bool:
        return self.pos >= len(self.data)


def canonical_json(obj: Any) -> str:
    """Stable JSON rendering (sorted keys, compact separators)."""
    import json

    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

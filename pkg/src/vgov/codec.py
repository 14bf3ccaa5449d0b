"""Canonical tagged binary encoding.

Wire format (all multi-byte integers big-endian)::

    value   := tag payload
    length  := n:u8 be_bytes[n]          minimal form; zero is the single byte 0x00

    0x00 NONE
    0x01 FALSE
    0x02 TRUE
    0x03 INT      i64
    0x04 FIXED    i64 raw (units of 10^-9)
    0x05 BYTES    length data
    0x06 STR      length utf8
    0x07 LIST     length value*
    0x08 MAP      length (key value)*   pairs sorted by encoded key bytes
    0x09 SET      length value*         elements sorted by encoded bytes
    0x0A RECORD   STR(type name) MAP(fields)

An empty map is therefore exactly ``08 00``. Floats are never encodable.
Records are dataclasses registered with :func:`record`; decoding rebuilds
the registered type. See ``docs/wire-format.md`` for test vectors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from typing import Any, Callable

from vgov.fixed import Fixed, INT64_MAX, INT64_MIN

T_NONE = 0x00
T_FALSE = 0x01
T_TRUE = 0x02
T_INT = 0x03
T_FIXED = 0x04
T_BYTES = 0x05
T_STR = 0x06
T_LIST = 0x07
T_MAP = 0x08
T_SET = 0x09
T_RECORD = 0x0A

EMPTY_MAP = bytes([T_MAP, 0x00])

_I64 = struct.Struct(">q")


class CodecError(ValueError):
    pass


class UnencodableValue(CodecError):
    pass


class DecodeError(CodecError):
    pass


_RECORDS: dict[str, type] = {}
_RECORD_NAMES: dict[type, str] = {}


def record(name: str) -> Callable[[type], type]:
    """Class decorator registering a dataclass as a canonical record type."""

    def wrap(cls: type) -> type:
        if not dataclasses.is_dataclass(cls):
            raise TypeError(f"{cls.__name__} must be a dataclass")
        if name in _RECORDS and _RECORDS[name] is not cls:
            raise TypeError(f"record name {name!r} already registered")
        _RECORDS[name] = cls
        _RECORD_NAMES[cls] = name
        return cls

    return wrap


def _length(n: int) -> bytes:
    if n == 0:
        return b"\x00"
    body = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([len(body)]) + body


def _encode(value: Any, out: bytearray) -> None:
    if value is None:
        out.append(T_NONE)
    elif value is False:
        out.append(T_FALSE)
    elif value is True:
        out.append(T_TRUE)
    elif type(value) is int:
        if value < INT64_MIN or value > INT64_MAX:
            raise UnencodableValue(f"integer out of i64 range: {value}")
        out.append(T_INT)
        out += _I64.pack(value)
    elif type(value) is Fixed:
        out.append(T_FIXED)
        out += _I64.pack(value.raw)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        data = bytes(value)
        out.append(T_BYTES)
        out += _length(len(data))
        out += data
    elif isinstance(value, str):
        data = value.encode("utf-8")
        out.append(T_STR)
        out += _length(len(data))
        out += data
    elif isinstance(value, (list, tuple)):
        out.append(T_LIST)
        out += _length(len(value))
        for item in value:
            _encode(item, out)
    elif isinstance(value, dict):
        pairs = sorted((encode(k), encode(v)) for k, v in value.items())
        for i in range(1, len(pairs)):
            if pairs[i][0] == pairs[i - 1][0]:
                raise UnencodableValue("map keys collide after encoding")
        out.append(T_MAP)
        out += _length(len(pairs))
        for k, v in pairs:
            out += k
            out += v
    elif isinstance(value, (set, frozenset)):
        items = sorted(encode(v) for v in value)
        out.append(T_SET)
        out += _length(len(items))
        for item in items:
            out += item
    elif type(value) in _RECORD_NAMES:
        out.append(T_RECORD)
        _encode(_RECORD_NAMES[type(value)], out)
        fields = {f.name: getattr(value, f.name) for f in dataclasses.fields(value)}
        _encode(fields, out)
    else:
        raise UnencodableValue(f"cannot encode value of type {type(value).__name__}")


def encode(value: Any) -> bytes:
    """Canonical bytes of ``value``."""
    out = bytearray()
    _encode(value, out)
    return bytes(out)


canonical_encode = encode


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError(f"truncated input at offset {self.pos}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def byte(self) -> int:
        return self.take(1)[0]

    def length(self) -> int:
        n = self.byte()
        if n == 0:
            return 0
        body = self.take(n)
        if body[0] == 0:
            raise DecodeError(f"non-minimal length at offset {self.pos - n}")
        return int.from_bytes(body, "big")


def _hashable(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_hashable(x) for x in v)
    if isinstance(v, dict):
        raise DecodeError("maps cannot be set members or keys")
    return v


def _freeze(v: Any) -> Any:
    # record fields hold tuples, never lists
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, dict):
        return {k: _freeze(x) for k, x in v.items()}
    return v


def _decode(r: _Reader) -> Any:
    start = r.pos
    tag = r.byte()
    if tag == T_NONE:
        return None
    if tag == T_FALSE:
        return False
    if tag == T_TRUE:
        return True
    if tag == T_INT:
        return _I64.unpack(r.take(8))[0]
    if tag == T_FIXED:
        return Fixed(_I64.unpack(r.take(8))[0])
    if tag == T_BYTES:
        return r.take(r.length())
    if tag == T_STR:
        try:
            return r.take(r.length()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8 at offset {start}") from exc
    if tag == T_LIST:
        return [_decode(r) for _ in range(r.length())]
    if tag == T_MAP:
        n = r.length()
        out = {}
        prev = None
        for _ in range(n):
            k0 = r.pos
            key = _decode(r)
            kb = r.buf[k0:r.pos]
            if prev is not None and kb <= prev:
                raise DecodeError(f"map keys not strictly ascending at offset {k0}")
            prev = kb
            out[_hashable(key)] = _decode(r)
        return out
    if tag == T_SET:
        n = r.length()
        items = []
        prev = None
        for _ in range(n):
            e0 = r.pos
            item = _decode(r)
            eb = r.buf[e0:r.pos]
            if prev is not None and eb <= prev:
                raise DecodeError(f"set elements not strictly ascending at offset {e0}")
            prev = eb
            items.append(_hashable(item))
        return frozenset(items)
    if tag == T_RECORD:
        name = _decode(r)
        fields = _decode(r)
        if not isinstance(name, str) or not isinstance(fields, dict):
            raise DecodeError(f"malformed record at offset {start}")
        cls = _RECORDS.get(name)
        if cls is None:
            raise DecodeError(f"unknown record type {name!r}")
        try:
            return cls(**{k: _freeze(v) for k, v in fields.items()})
        except (TypeError, ValueError, ArithmeticError) as exc:
            raise DecodeError(f"record {name!r} fields do not match: {exc}") from exc
    raise DecodeError(f"unknown tag 0x{tag:02x} at offset {start}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode`; rejects trailing bytes and non-canonical input."""
    r = _Reader(bytes(data))
    value = _decode(r)
    if r.pos != len(r.buf):
        raise DecodeError(f"trailing bytes at offset {r.pos}")
    return value


def digest(value: Any) -> bytes:
    """SHA-256 of the canonical encoding."""
    return hashlib.sha256(encode(value)).digest()


def hexdigest(value: Any) -> str:
    return digest(value).hex()


def dump_lines(values, fh) -> None:
    """Write records as one hex-encoded canonical value per line."""
    for v in values:
        fh.write(encode(v).hex())
        fh.write("\n")


def load_lines(fh) -> list:
    out = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(decode(bytes.fromhex(line)))
        except ValueError as exc:
            raise DecodeError(f"line {lineno}: {exc}") from exc
    return out

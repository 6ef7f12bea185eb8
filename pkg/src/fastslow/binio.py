"""Canonical little-endian binary primitives shared by the container formats.

Everything here is byte-deterministic: floats are IEEE-754 binary64, strings
are UTF-8 with a u32 length prefix, and textual metadata maps are serialized
with sorted keys. docs/container_format.md specifies the layouts built on top
of these primitives.
"""

from __future__ import annotations

import struct
from typing import Sequence


class FormatError(Exception):
    """Base class for malformed binary input."""


class TruncatedPayload(FormatError):
    """Input ended before a declared field was complete."""


# sentinel length used to encode an absent optional string
_NONE_LEN = 0xFFFFFFFF


class Reader:
    """Cursor over immutable bytes with typed little-endian reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, have {self.remaining()}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64s(self, n: int) -> tuple:
        return struct.unpack(f"<{n}d", self.take(8 * n))

    def string(self) -> str:
        n = self.u32()
        if n == _NONE_LEN:
            raise FormatError("absent-string sentinel where a string was required")
        return self.take(n).decode("utf-8")

    def opt_string(self) -> str | None:
        n = self.u32()
        if n == _NONE_LEN:
            return None
        return self.take(n).decode("utf-8")


class Writer:
    """Accumulates canonical little-endian bytes."""

    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def i64(self, v: int) -> None:
        self._parts.append(struct.pack("<q", v))

    def f64(self, v: float) -> None:
        self._parts.append(struct.pack("<d", v))

    def f64s(self, vs: Sequence[float]) -> None:
        self._parts.append(struct.pack(f"<{len(vs)}d", *vs))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self._parts.append(struct.pack("<I", len(b)))
        self._parts.append(b)

    def opt_string(self, s: str | None) -> None:
        if s is None:
            self._parts.append(struct.pack("<I", _NONE_LEN))
        else:
            self.string(s)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


def pack_text_map(m: dict[str, str]) -> bytes:
    """Canonical key-sorted UTF-8 map: one `key=value\\n` line per entry.

    Keys must not contain '=' or newlines; values must not contain newlines.
    """
    for k, v in m.items():
        if "=" in k or "\n" in k:
            raise ValueError(f"illegal metadata key {k!r}")
        if "\n" in v:
            raise ValueError(f"illegal newline in metadata value for {k!r}")
    lines = [f"{k}={m[k]}\n" for k in sorted(m)]
    return "".join(lines).encode("utf-8")


def unpack_text_map(b: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    if not b:
        return out
    try:
        text = b.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"metadata block is not UTF-8: {e}") from None
    for line in text.split("\n"):
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"metadata line without '=': {line!r}")
        k, v = line.split("=", 1)
        if k in out:
            raise FormatError(f"duplicate metadata key {k!r}")
        out[k] = v
    return out


def escape_value(s: str) -> str:
    """Escape backslashes and newlines so a value fits on one text line."""
    return s.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def unescape_value(s: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\":
            if i + 1 >= len(s):
                raise FormatError("dangling escape at end of value")
            nxt = s[i + 1]
            if nxt == "\\":
                out.append("\\")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "r":
                out.append("\r")
            else:
                raise FormatError(f"unknown escape \\{nxt}")
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def format_float(v: float) -> str:
    """Shortest round-trip decimal form (repr); parse back with float()."""
    return repr(float(v))

"""ORP1 checkpoint container.

Layout (all integers little-endian)::

    b"ORP1"
    u32 header length, header bytes (UTF-8 ``key=value`` lines)
    per tensor: u32 name length, name (UTF-8), u32 rank,
                rank x u64 dims, float32 values
    u32 CRC32 of every preceding byte

The header must carry ``version`` and ``type``; ``tensors`` holds the count.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .wavio import FormatError

MAGIC = b"ORP1"
VERSION = "1"


def _encode_header(header: dict[str, str]) -> bytes:
    lines = []
    for k, v in header.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"header entry {k!r} is not representable")
        lines.append(f"{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_header(raw: bytes) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not UTF-8") from exc
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        out[key] = val
    return out


def save(path, kind: str, header: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    head = {"version": VERSION, "type": kind, "tensors": str(len(tensors)), **header}
    buf = bytearray(MAGIC)
    hb = _encode_header(head)
    buf += struct.pack("<I", len(hb)) + hb
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path, kind: str | None = None) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an ORP1 checkpoint")
    if len(data) < 12:
        raise FormatError(f"{path}: checkpoint is truncated")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    r = _Reader(body)
    r.take(4)
    header = _decode_header(r.take(r.u32()))
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    if kind is not None and header.get("type") != kind:
        raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {header.get('type')!r}")
    try:
        count = int(header["tensors"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: header lacks a tensor count") from exc
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"{path}: implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(body):
        raise FormatError(f"{path}: trailing bytes after tensor block")
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise FormatError(f"{path}: checksum mismatch")
    return header, tensors

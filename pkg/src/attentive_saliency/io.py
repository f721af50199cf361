"""File formats: SAMT tensors, parameter containers and binary PGM images.

SAMT layout: b"SAMT", version byte 0x01, u8 rank, rank little-endian u32
extents, then the row-major values as little-endian float64.

A parameter container is b"SAMP" + u8 version + u32 manifest length +
UTF-8 JSON manifest + concatenated SAMT blobs.  The manifest maps each
tensor name to its byte offset (relative to the end of the manifest),
blob length, shape and role, and carries free-form metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMT_MAGIC = b"SAMT"
SAMT_VERSION = 1
SAMP_MAGIC = b"SAMP"
SAMP_VERSION = 1


class FormatError(ValueError):
    """Base class for malformed or unsupported file contents."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


# -- SAMT ---------------------------------------------------------------------

def samt_encode(x) -> bytes:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    head = SAMT_MAGIC + bytes([SAMT_VERSION, a.ndim])
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).astype("<f8").tobytes()


def samt_decode(buf: bytes, offset: int = 0):
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    if len(buf) - offset < 6:
        raise TruncatedPayloadError("SAMT header is truncated")
    if buf[offset:offset + 4] != SAMT_MAGIC:
        raise MalformedHeaderError("missing SAMT magic")
    version, rank = buf[offset + 4], buf[offset + 5]
    if version != SAMT_VERSION:
        raise UnsupportedFormatError(f"SAMT version {version} is not supported")
    pos = offset + 6
    if len(buf) - pos < 4 * rank:
        raise TruncatedPayloadError("SAMT extents are truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise TruncatedPayloadError(f"SAMT payload needs {nbytes} bytes, found {len(buf) - pos}")
    a = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return a.reshape(shape), pos + nbytes


def write_samt(path, x):
    Path(path).write_bytes(samt_encode(x))


def read_samt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    a, end = samt_decode(buf)
    if end != len(buf):
        raise MalformedHeaderError(f"{len(buf) - end} trailing bytes after SAMT tensor")
    return a


# -- parameter container -----------------------------------------------------------

def samp_encode(tensors: dict, roles: dict | None = None, meta: dict | None = None) -> bytes:
    roles = roles or {}
    blobs, entries, offset = [], {}, 0
    for name in sorted(tensors):
        blob = samt_encode(tensors[name])
        entries[name] = {
            "offset": offset, "length": len(blob),
            "shape": list(np.shape(tensors[name])), "role": roles.get(name, ""),
        }
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode()
    head = SAMP_MAGIC + bytes([SAMP_VERSION]) + struct.pack("<I", len(manifest))
    return head + manifest + b"".join(blobs)


def samp_decode(buf: bytes):
    """Return ``(tensors, manifest)``."""
    if len(buf) < 9:
        raise TruncatedPayloadError("container header is truncated")
    if buf[:4] != SAMP_MAGIC:
        raise MalformedHeaderError("missing SAMP magic")
    if buf[4] != SAMP_VERSION:
        raise UnsupportedFormatError(f"container version {buf[4]} is not supported")
    (mlen,) = struct.unpack_from("<I", buf, 5)
    if len(buf) < 9 + mlen:
        raise TruncatedPayloadError("container manifest is truncated")
    try:
        manifest = json.loads(buf[9:9 + mlen].decode())
        entries = manifest["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise MalformedHeaderError(f"bad container manifest: {e}") from None
    base = 9 + mlen
    out = {}
    for name, e in entries.items():
        a, end = samt_decode(buf, base + e["offset"])
        if end - base - e["offset"] != e["length"] or list(a.shape) != e["shape"]:
            raise MalformedHeaderError(f"tensor {name!r} disagrees with its manifest entry")
        out[name] = a
    return out, manifest


def write_samp(path, tensors, roles=None, meta=None):
    Path(path).write_bytes(samp_encode(tensors, roles, meta))


def read_samp(path):
    return samp_decode(Path(path).read_bytes())


# -- PGM ------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageGray:
    """Gray image with integer samples in [0, maxval]; maxval is 255 or 65535."""
    samples: np.ndarray
    maxval: int = 255

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"image must be a non-empty H x W grid, got {s.shape}")
        if self.maxval not in (255, 65535):
            raise UnsupportedFormatError(f"maxval {self.maxval} is not supported")
        if not np.issubdtype(s.dtype, np.integer):
            if not np.all(np.equal(np.mod(s, 1), 0)):
                raise ValueError("samples must be integers")
        if s.min() < 0 or s.max() > self.maxval:
            raise ValueError(f"samples must lie in [0, {self.maxval}]")
        object.__setattr__(self, "samples", s.astype(np.uint16 if self.maxval > 255 else np.uint8))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def as_float(self) -> np.ndarray:
        return self.samples.astype(np.float64) / self.maxval

    @classmethod
    def from_float(cls, x, maxval: int = 255) -> "ImageGray":
        """Quantize values in [0, 1] (clipped) to the nearest level."""
        x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
        return cls(np.rint(x * maxval).astype(np.int64), maxval)


def pgm_encode(img: ImageGray) -> bytes:
    head = f"P5\n{img.width} {img.height}\n{img.maxval}\n".encode("ascii")
    dt = ">u2" if img.maxval > 255 else "u1"
    return head + img.samples.astype(dt).tobytes()


def _header_tokens(buf: bytes, count: int):
    """Pull ``count`` whitespace-separated tokens after the magic, skipping comments."""
    pos, tokens = 2, []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError("PGM header ends early")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedHeaderError("PGM header is not terminated by whitespace")
    return tokens, pos + 1


def pgm_decode(buf: bytes) -> ImageGray:
    if len(buf) < 2 or buf[:1] != b"P" or not buf[1:2].isdigit():
        raise MalformedHeaderError("missing PGM magic")
    if buf[:2] != b"P5":
        raise UnsupportedFormatError(f"only binary P5 PGM is supported, got {buf[:2].decode(errors='replace')}")
    tokens, pos = _header_tokens(buf, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeaderError(f"non-numeric PGM header fields {tokens}") from None
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"PGM extents must be positive, got {width}x{height}")
    if maxval not in (255, 65535):
        raise UnsupportedFormatError(f"PGM maxval {maxval} is not supported (use 255 or 65535)")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dt.itemsize
    if len(buf) - pos < need:
        raise TruncatedPayloadError(f"PGM raster needs {need} bytes, found {len(buf) - pos}")
    raster = np.frombuffer(buf, dtype=dt, count=width * height, offset=pos)
    if raster.max() > maxval:
        raise FormatError(f"PGM sample {int(raster.max())} exceeds maxval {maxval}")
    return ImageGray(raster.reshape(height, width).astype(np.int64), maxval)


def write_pgm(path, img: ImageGray):
    Path(path).write_bytes(pgm_encode(img))


def read_pgm(path) -> ImageGray:
    return pgm_decode(Path(path).read_bytes())

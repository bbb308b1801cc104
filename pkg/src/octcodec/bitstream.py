"""Container format: fixed header followed by four length-prefixed substreams.

See FORMAT.md for the byte layout.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"MGOC"
VERSION = 1
LAMBDA_SCALE = 10**6
LAMBDA_MIN = 1e-6
LAMBDA_MAX = 0.5
PAD_GRANULE = 128
NUM_SUBSTREAMS = 4

# magic, version, model_id, width, height, lambda_q, n, alpha_num, reserved, crc32
_HEADER = struct.Struct("<4sBHIIiHBBI")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """Base class for container parse failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MalformedError(FormatError):
    pass


def quantize_lambda(lam: float) -> int:
    """λ to int32 at a fixed scale of 1e-6 (round half away from zero)."""
    lam = float(lam)
    if not (LAMBDA_MIN <= lam <= LAMBDA_MAX):
        raise ValueError(f"lambda {lam} outside the supported range [{LAMBDA_MIN}, {LAMBDA_MAX}]")
    return int(np.floor(lam * LAMBDA_SCALE + 0.5))


def dequantize_lambda(lambda_q: int) -> float:
    if lambda_q < 1:
        raise MalformedError(f"quantized lambda must be >= 1, got {lambda_q}")
    return lambda_q / LAMBDA_SCALE


def padded_size(n: int, granule: int = PAD_GRANULE) -> int:
    return -(-n // granule) * granule


def pad_image(x: np.ndarray, granule: int = PAD_GRANULE) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad an H x W x C image on the bottom/right up to multiples of ``granule``."""
    h, w = x.shape[:2]
    ph, pw = padded_size(h, granule) - h, padded_size(w, granule) - w
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if h > 1 and w > 1 else "edge"
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode=mode), (h, w)


def crop_image(x: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    return x[:h, :w]


@dataclass(frozen=True)
class Header:
    model_id: int
    width: int
    height: int
    lambda_q: int
    n: int
    alpha_numerator: int
    version: int = VERSION

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise MalformedError(f"image dims must be positive, got {self.width}x{self.height}")
        if self.lambda_q < 1:
            raise MalformedError(f"quantized lambda must be >= 1, got {self.lambda_q}")
        if not 0 < self.alpha_numerator < 256:
            raise MalformedError(f"alpha numerator must be in 1..255, got {self.alpha_numerator}")
        if self.n < 1:
            raise MalformedError("latent channel count must be positive")

    @property
    def lam(self) -> float:
        return dequantize_lambda(self.lambda_q)

    @property
    def alpha(self) -> float:
        return self.alpha_numerator / 256


@dataclass(frozen=True)
class Container:
    header: Header
    substreams: tuple = field(default_factory=lambda: (b"",) * NUM_SUBSTREAMS)

    def __post_init__(self):
        object.__setattr__(self, "substreams", tuple(bytes(s) for s in self.substreams))
        if len(self.substreams) != NUM_SUBSTREAMS:
            raise MalformedError(f"container needs {NUM_SUBSTREAMS} substreams, got {len(self.substreams)}")

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + sum(4 + len(s) for s in self.substreams)

    def with_header(self, **changes) -> "Container":
        return replace(self, header=replace(self.header, **changes))


def _pack_header(h: Header, crc: int) -> bytes:
    return _HEADER.pack(MAGIC, h.version, h.model_id, h.width, h.height, h.lambda_q, h.n, h.alpha_numerator, 0, crc)


def _body(c: Container) -> bytes:
    return b"".join(struct.pack("<I", len(s)) + s for s in c.substreams)


def serialize(c: Container) -> bytes:
    c.header.validate()
    body = _body(c)
    crc = zlib.crc32(_pack_header(c.header, 0) + body)
    return _pack_header(c.header, crc) + body


def deserialize(blob: bytes) -> Container:
    if len(blob) < HEADER_SIZE:
        raise TruncatedError(f"{len(blob)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, model_id, width, height, lambda_q, n, alpha_num, reserved, crc = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    pos = HEADER_SIZE
    streams = []
    for i in range(NUM_SUBSTREAMS):
        if pos + 4 > len(blob):
            raise TruncatedError(f"missing length of substream {i}")
        (length,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + length > len(blob):
            raise TruncatedError(f"substream {i} claims {length} bytes, only {len(blob) - pos} remain")
        streams.append(blob[pos : pos + length])
        pos += length
    if pos != len(blob):
        raise MalformedError(f"{len(blob) - pos} trailing bytes after the last substream")
    if reserved != 0:
        raise MalformedError("reserved header byte is not zero")
    header = Header(model_id, width, height, lambda_q, n, alpha_num, version)
    expected = zlib.crc32(_pack_header(header, 0) + blob[HEADER_SIZE:])
    if crc != expected:
        raise ChecksumError("container checksum mismatch")
    header.validate()
    return Container(header, tuple(streams))

"""Tiles, labeled patches, checkpoints and their binary file formats.

OCT1 (tiles, little-endian)::

    "OCT1" u16 version=1 u16 C u16 H u16 W i16 year u8 month 7s region
    f64 lat f64 lon
    C x (u8 len, ascii band name)
    C*H*W f32 planes (band-major, row-major)
    C bit-packed validity planes (row-major, each padded to a byte)

CKP1 (checkpoints)::

    "CKP1" u16 version u8 len + profile name
    u16 C, C x (f32 mean, f32 std)
    u32 n_params, per param: u16 len + name, u8 ndim, ndim x u32, f32 data
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

OLCI_BANDS = tuple(f"OL{i}" for i in range(1, 13)) + ("OL16", "OL17", "OL18", "OL21")
SST_BAND = "SST"

TILE_MAGIC = b"OCT1"
TILE_VERSION = 1
_TILE_HEADER = struct.Struct("<4sHHHHhB7sdd")

CKPT_MAGIC = b"CKP1"
CKPT_VERSION = 1

CHL = "chl"  # log10 mg/m^3
PP = "pp"  # log10 mgC/m^2/day
TARGET_KINDS = (CHL, PP)

LABEL_BLOCK = 3


class PixelValidityError(FormatError, ValidationError):
    """Stored plane value disagrees with its validity bit."""


def band_set(count: int, with_sst: bool = False) -> tuple[str, ...]:
    """Band identifiers for ``count`` bands, SST last when requested."""
    n_olci = count - 1 if with_sst else count
    if n_olci <= len(OLCI_BANDS):
        names = OLCI_BANDS[:n_olci]
    else:
        names = tuple(f"B{i}" for i in range(n_olci))
    return names + ((SST_BAND,) if with_sst else ())


def atomic_write(path, data: bytes) -> int:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


@dataclass(eq=False)
class Tile:
    bands: tuple[str, ...]
    planes: np.ndarray  # C x H x W float32, NaN where invalid
    validity: np.ndarray  # C x H x W bool
    region: str = ""
    year: int = 0
    month: int = 0
    lat: float = 0.0
    lon: float = 0.0

    @classmethod
    def from_planes(cls, bands, planes, **meta) -> "Tile":
        """Build a tile whose validity is derived from the finiteness of ``planes``."""
        planes = np.asarray(planes, dtype=np.float32)
        validity = np.isfinite(planes)
        planes = np.where(validity, planes, np.float32(np.nan)).astype(np.float32)
        return cls(tuple(bands), planes, validity, **meta)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.planes.shape

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def with_planes(self, planes: np.ndarray, validity: np.ndarray | None = None) -> "Tile":
        if validity is None:
            validity = np.isfinite(planes)
        return replace(self, planes=planes, validity=validity)

    def __eq__(self, other):
        if not isinstance(other, Tile):
            return NotImplemented
        return (
            self.bands == other.bands
            and (self.region, self.year, self.month) == (other.region, other.year, other.month)
            and struct.pack("<dd", self.lat, self.lon) == struct.pack("<dd", other.lat, other.lon)
            and self.planes.shape == other.planes.shape
            and self.planes.tobytes() == other.planes.tobytes()
            and np.array_equal(self.validity, other.validity)
        )

    def validate(self) -> None:
        p, v = self.planes, self.validity
        if p.ndim != 3 or p.dtype != np.float32:
            raise ValidationError(f"planes must be a 3-D float32 array, got {p.dtype} {p.shape}")
        if v.shape != p.shape or v.dtype != bool:
            raise ValidationError("validity must be a boolean array shaped like planes")
        if len(self.bands) != p.shape[0]:
            raise ValidationError(f"{len(self.bands)} band names for {p.shape[0]} planes")
        if len(set(self.bands)) != len(self.bands):
            raise ValidationError(f"duplicate band identifiers in {self.bands}")
        for b in self.bands:
            if not b or len(b) > 255 or not b.isascii():
                raise ValidationError(f"bad band identifier {b!r}")
        if len(self.region) > 7 or not self.region.isascii():
            raise ValidationError(f"region code {self.region!r} must be <= 7 ascii chars")
        if not 0 <= self.month <= 12:
            raise ValidationError(f"month {self.month} outside 0..12")
        finite = np.isfinite(p)
        if np.any(v & ~finite):
            raise ValidationError("valid pixel holds a non-finite value")
        if np.any(~v & ~np.isnan(p)):
            raise ValidationError("invalid pixel does not hold NaN")


def tile_nbytes(n_bands: int, height: int, width: int, band_names=()) -> int:
    names = sum(1 + len(b) for b in band_names) if band_names else 0
    return (_TILE_HEADER.size + names + n_bands * height * width * 4
            + n_bands * math.ceil(height * width / 8))


def encode_tile(tile: Tile) -> bytes:
    tile.validate()
    c, h, w = tile.shape
    parts = [_TILE_HEADER.pack(
        TILE_MAGIC, TILE_VERSION, c, h, w, tile.year, tile.month,
        tile.region.ljust(7).encode("ascii"), tile.lat, tile.lon)]
    for b in tile.bands:
        raw = b.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
    parts.append(tile.planes.astype("<f4", copy=False).tobytes())
    for plane in tile.validity:
        parts.append(np.packbits(plane.ravel()).tobytes())
    return b"".join(parts)


def decode_tile(buf: bytes) -> Tile:
    if len(buf) < _TILE_HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", len(buf))
    magic, version, c, h, w, year, month, region, lat, lon = _TILE_HEADER.unpack_from(buf, 0)
    if magic != TILE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != TILE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if month > 12:
        raise FormatError(f"month {month} outside 0..12", 16)
    off = _TILE_HEADER.size
    bands = []
    for _ in range(c):
        if off >= len(buf):
            raise FormatError("truncated band table", off)
        n = buf[off]
        name = buf[off + 1: off + 1 + n]
        if n == 0 or len(name) != n or not name.isascii():
            raise FormatError("bad band name entry", off)
        bands.append(name.decode("ascii"))
        off += 1 + n
    plane_bytes = c * h * w * 4
    bits_per_plane = math.ceil(h * w / 8)
    expected = off + plane_bytes + c * bits_per_plane
    if len(buf) != expected:
        raise FormatError(f"file length {len(buf)} != expected {expected}",
                          min(len(buf), expected))
    planes = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=off)
    planes = planes.astype(np.float32).reshape(c, h, w)
    vbase = off + plane_bytes
    packed = np.frombuffer(buf, dtype=np.uint8, count=c * bits_per_plane, offset=vbase)
    validity = np.unpackbits(packed.reshape(c, bits_per_plane), axis=1)[:, : h * w]
    validity = validity.astype(bool).reshape(c, h, w)

    bad = validity & ~np.isfinite(planes)
    if bad.any():
        i = int(np.flatnonzero(bad.ravel())[0])
        raise PixelValidityError("valid pixel stores a non-finite value", off + 4 * i)
    bad = ~validity & ~np.isnan(planes)
    if bad.any():
        i = int(np.flatnonzero(bad.ravel())[0])
        raise PixelValidityError("invalid pixel does not store NaN", off + 4 * i)
    return Tile(tuple(bands), planes, validity, region.decode("ascii").rstrip(" "),
                year, month, lat, lon)


def write_tile(tile: Tile, path) -> int:
    return atomic_write(path, encode_tile(tile))


def read_tile(path) -> Tile:
    return decode_tile(Path(path).read_bytes())


@dataclass(eq=False)
class LabeledPatch:
    tile: Tile
    label: np.ndarray  # H x W float32, NaN off the labeled block
    kind: str = CHL
    source_id: str = ""

    @property
    def labeled_mask(self) -> np.ndarray:
        return np.isfinite(self.label)

    @property
    def value(self) -> float:
        return float(self.label[self.labeled_mask][0])


def validate_labeled_patch(p: LabeledPatch, size: int = 80) -> list[str]:
    """Return a list of violations; an empty list means the patch is well formed."""
    out = []
    if p.tile.planes.shape[1:] != (size, size):
        out.append(f"tile extent {p.tile.planes.shape[1:]} is not {size}x{size}")
    if p.label.shape != (size, size):
        out.append(f"label extent {p.label.shape} is not {size}x{size}")
    if p.kind not in TARGET_KINDS:
        out.append(f"unknown target kind {p.kind!r}")
    if np.isinf(p.label).any():
        out.append("label plane holds an infinite value")
    mask = ~np.isnan(p.label)
    rows, cols = np.nonzero(mask)
    if mask.sum() != LABEL_BLOCK ** 2 or not rows.size or (
            rows.max() - rows.min() + 1, cols.max() - cols.min() + 1) != (LABEL_BLOCK, LABEL_BLOCK):
        out.append("label block not 3x3")
    values = p.label[mask]
    if values.size and np.unique(values).size != 1:
        out.append("labeled values are not uniform")
    if values.size and not np.isfinite(values).all():
        out.append("labeled value is not finite")
    return out


@dataclass(eq=False)
class ModelCheckpoint:
    profile: str
    band_mean: np.ndarray  # float32 [C]
    band_std: np.ndarray  # float32 [C]
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = CKPT_VERSION

    def validate(self) -> None:
        if self.band_mean.shape != self.band_std.shape or self.band_mean.ndim != 1:
            raise ValidationError("band mean/std must be matching 1-D arrays")
        if not np.all(self.band_std > 0):
            raise ValidationError("every band std must be > 0")
        if not (np.isfinite(self.band_mean).all() and np.isfinite(self.band_std).all()):
            raise ValidationError("band statistics must be finite")

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return encode_checkpoint(self) == encode_checkpoint(other)


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    ckpt.validate()
    name = ckpt.profile.encode("ascii")
    parts = [CKPT_MAGIC, struct.pack("<HB", ckpt.version, len(name)), name,
             struct.pack("<H", len(ckpt.band_mean))]
    stats = np.stack([ckpt.band_mean, ckpt.band_std], axis=1).astype("<f4")
    parts.append(stats.tobytes())
    parts.append(struct.pack("<I", len(ckpt.params)))
    for pname, arr in ckpt.params.items():
        raw = pname.encode("ascii")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ModelCheckpoint:
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated checkpoint (need {n} bytes)", off)
        chunk = buf[off: off + n]
        off += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad magic", 0)
    version, nlen = struct.unpack("<HB", take(3))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    profile = take(nlen).decode("ascii")
    (c,) = struct.unpack("<H", take(2))
    stats = np.frombuffer(take(8 * c), dtype="<f4").astype(np.float32).reshape(c, 2)
    (n_params,) = struct.unpack("<I", take(4))
    params = OrderedDict()
    for _ in range(n_params):
        (ln,) = struct.unpack("<H", take(2))
        pname = take(ln).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        if pname in params:
            raise FormatError(f"duplicate parameter {pname!r}", off)
        params[pname] = data.reshape(dims)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    ckpt = ModelCheckpoint(profile, stats[:, 0].copy(), stats[:, 1].copy(), params, version)
    ckpt.validate()
    return ckpt


def write_checkpoint(ckpt: ModelCheckpoint, path) -> int:
    return atomic_write(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())

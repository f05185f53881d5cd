"""Feature-map containers and the AAFM binary file format.

Every feature enters the pipeline through this module, either as an
in-memory :class:`FeatureMap` or as an ``.aafm`` file:

    magic ``b"AAFM"`` | version u32 LE | W, H, C u32 LE | W*H*C float32 LE

Payload values are laid out h-major (row), then w (column), then channel,
which is exactly a C-contiguous ``(H, W, C)`` float32 array. NaN and Inf
are refused on both read and write: all downstream distance math assumes
finite activations.

The manifest is a UTF-8 text file, one entry per line::

    id<TAB>path<TAB>role[<TAB>x,y | frame,<index>]

where role is ``database`` or ``query``, ``x,y`` is a position in meters,
and ``#`` starts a comment line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union

import numpy as np

AAFM_MAGIC = b"AAFM"
AAFM_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, W, H, C
HEADER_SIZE = _HEADER.size

ROLE_DATABASE = "database"
ROLE_QUERY = "query"


class AAFMError(Exception):
    """Base class for AAFM format violations."""


class BadMagicError(AAFMError):
    """Stream does not start with the AAFM magic bytes."""


class VersionMismatchError(AAFMError):
    """Header declares an unsupported format version."""


class DimensionError(AAFMError):
    """Header declares a degenerate dimension (W, H or C of zero)."""


class PayloadLengthError(AAFMError):
    """Payload is shorter than the header-declared W*H*C values."""


class NonFiniteError(AAFMError):
    """Payload contains NaN or Inf."""


class ManifestError(Exception):
    """Malformed manifest line or duplicate image id."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense W x H x C activation grid for one image.

    ``data`` has shape ``(H, W, C)`` float32, C-contiguous, all finite.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float32)
        if a.ndim != 3:
            raise DimensionError(f"feature map must be (H, W, C), got shape {a.shape}")
        if min(a.shape) < 1:
            raise DimensionError(f"degenerate feature map dimensions {a.shape}")
        if not np.isfinite(a).all():
            raise NonFiniteError("feature map contains NaN or Inf")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GlobalDescriptor:
    """L2-normalized C-dimensional global feature vector."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size < 1:
            raise ValueError(f"descriptor must be a non-empty vector, got shape {v.shape}")
        norm = float(np.linalg.norm(v.astype(np.float64)))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"descriptor must be unit-norm, got |v| = {norm}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class LocalFeatureGrid:
    """N x N grid of L2-normalized patch features.

    ``cells`` has shape ``(N, N, C)`` float32 with ``cells[i, j]`` the
    feature at column i, row j (i horizontal, j vertical).
    """

    cells: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.cells, dtype=np.float32)
        if c.ndim != 3 or c.shape[0] != c.shape[1]:
            raise ValueError(f"grid cells must be (N, N, C), got shape {c.shape}")
        if min(c.shape) < 1:
            raise ValueError(f"degenerate grid dimensions {c.shape}")
        norms = np.linalg.norm(c.astype(np.float64), axis=2)
        if not np.allclose(norms, 1.0, atol=1e-5):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"grid cells must be unit-norm (worst deviation {worst:.2e})")
        object.__setattr__(self, "cells", c)

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def channels(self) -> int:
        return self.cells.shape[2]


@dataclass(frozen=True)
class GeoPosition:
    """Geotag as a planar position in meters."""

    x: float
    y: float


@dataclass(frozen=True)
class FrameIndex:
    """Geotag as a frame index in a traversal sequence."""

    index: int


Geotag = Union[GeoPosition, FrameIndex]


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: Path
    role: str
    geotag: Optional[Geotag] = None

    def __post_init__(self):
        if self.role not in (ROLE_DATABASE, ROLE_QUERY):
            raise ManifestError(f"unknown role {self.role!r} for {self.image_id!r}")


@dataclass(frozen=True)
class FeatureSetManifest:
    """Ordered set of feature files with roles and optional geotags."""

    entries: tuple[ManifestEntry, ...] = field(default=())

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            if e.image_id in seen:
                raise ManifestError(f"duplicate image id {e.image_id!r}")
            seen.add(e.image_id)
        object.__setattr__(self, "entries", entries)

    def database_entries(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.role == ROLE_DATABASE)

    def query_entries(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.role == ROLE_QUERY)

    def __len__(self) -> int:
        return len(self.entries)


def write_feature_map(fmap: FeatureMap, sink: BinaryIO) -> None:
    """Serialize ``fmap`` to ``sink`` in AAFM format.

    The byte output is a pure function of the map contents, so writing the
    same map twice yields identical bytes.
    """
    a = fmap.data
    if not np.isfinite(a).all():  # guards against post-construction mutation
        raise NonFiniteError("refusing to write NaN or Inf")
    h, w, c = a.shape
    sink.write(_HEADER.pack(AAFM_MAGIC, AAFM_VERSION, w, h, c))
    sink.write(a.astype("<f4", copy=False).tobytes())


def read_feature_map(source: BinaryIO) -> FeatureMap:
    """Parse one AAFM map from ``source``, validating header and payload."""
    header = source.read(HEADER_SIZE)
    if len(header) < HEADER_SIZE:
        raise BadMagicError("stream shorter than AAFM header")
    magic, version, w, h, c = _HEADER.unpack(header)
    if magic != AAFM_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != AAFM_VERSION:
        raise VersionMismatchError(f"unsupported AAFM version {version}")
    if min(w, h, c) < 1:
        raise DimensionError(f"degenerate dimensions W={w} H={h} C={c}")
    count = w * h * c
    payload = source.read(4 * count)
    if len(payload) != 4 * count:
        raise PayloadLengthError(
            f"expected {4 * count} payload bytes, got {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.isfinite(values).all():
        raise NonFiniteError("payload contains NaN or Inf")
    return FeatureMap(values)


def save_feature_map(fmap: FeatureMap, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
        write_feature_map(fmap, f)


def load_feature_map(path: Union[str, Path]) -> FeatureMap:
    with open(path, "rb") as f:
        return read_feature_map(f)


def _parse_geotag(fields: list[str], lineno: int) -> Geotag:
    raw = fields[0] if len(fields) == 1 else ",".join(fields)
    parts = raw.split(",")
    if len(parts) != 2:
        raise ManifestError(f"line {lineno}: geotag must be 'x,y' or 'frame,<index>'")
    if parts[0].strip() == "frame":
        try:
            return FrameIndex(int(parts[1]))
        except ValueError:
            raise ManifestError(f"line {lineno}: bad frame index {parts[1]!r}") from None
    try:
        return GeoPosition(float(parts[0]), float(parts[1]))
    except ValueError:
        raise ManifestError(f"line {lineno}: bad position {raw!r}") from None


def read_manifest(path: Union[str, Path]) -> FeatureSetManifest:
    """Parse a manifest file; relative feature paths resolve against it."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ManifestError(f"line {lineno}: expected id, path, role")
            image_id, rel, role = fields[0], fields[1], fields[2]
            geotag = _parse_geotag(fields[3:], lineno) if len(fields) > 3 else None
            fpath = Path(rel)
            if not fpath.is_absolute():
                fpath = base / fpath
            entries.append(ManifestEntry(image_id, fpath, role, geotag))
    return FeatureSetManifest(tuple(entries))


def write_manifest(manifest: FeatureSetManifest, path: Union[str, Path]) -> None:
    """Write manifest lines; paths under the manifest dir are relativized."""
    path = Path(path)
    base = path.parent
    lines = []
    for e in manifest.entries:
        p = e.path
        try:
            p = p.relative_to(base)
        except ValueError:
            pass
        parts = [e.image_id, str(p), e.role]
        if isinstance(e.geotag, GeoPosition):
            parts.append(f"{e.geotag.x!r},{e.geotag.y!r}")
        elif isinstance(e.geotag, FrameIndex):
            parts.append(f"frame,{e.geotag.index}")
        lines.append("\t".join(parts))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def manifest_from_rows(
    rows: Iterable[tuple[str, Union[str, Path], str, Optional[Geotag]]]
) -> FeatureSetManifest:
    return FeatureSetManifest(
        tuple(ManifestEntry(i, Path(p), role, tag) for i, p, role, tag in rows)
    )

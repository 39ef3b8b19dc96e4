"""Hexagonal spatial indexing, zip assignment, and slippy-tile arithmetic.

Regions are fixed-size hexagons (edge 2.604 km, ~5.161 km^2) identified by
an opaque 64-bit cell index. The grid is an axial hexagon lattice laid over
a plate carree projection, which keeps every operation deterministic and
dependency-free while preserving the contracts that matter downstream:
round-trip identity, containment, and the center-distance bound equal to
the hexagon edge length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError

RESOLUTION = 7
HEX_EDGE_KM = 2.604
EARTH_RADIUS_KM = 6371.0088
KM_PER_DEG = math.pi / 180.0 * EARTH_RADIUS_KM
MAX_MERCATOR_LAT = 85.0511

_SQRT3 = math.sqrt(3.0)
# Axial coordinates are packed as two offset 32-bit halves of one uint64.
_AXIAL_OFFSET = 1 << 31


@dataclass(frozen=True, order=True)
class RegionId:
    """One hexagonal cell; `cell` is opaque, `resolution` is fixed at 7."""

    cell: int
    resolution: int = RESOLUTION


@dataclass(frozen=True)
class ZipCentroid:
    zip: str
    lat: float
    lon: float


@dataclass(frozen=True)
class TileCoord:
    zoom: int
    x: int
    y: int


def _check_coords(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise ValidationError(f"non-finite coordinates ({lat}, {lon})")
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValidationError(f"coordinates ({lat}, {lon}) outside WGS84 bounds")


def _project_km(lat: float, lon: float) -> tuple[float, float]:
    return lon * KM_PER_DEG, lat * KM_PER_DEG


def _unproject_km(x: float, y: float) -> tuple[float, float]:
    return y / KM_PER_DEG, x / KM_PER_DEG


def _axial_round(qf: float, rf: float) -> tuple[int, int]:
    # Cube rounding: snap fractional axial coords to the nearest cell.
    sf = -qf - rf
    q, r, s = round(qf), round(rf), round(sf)
    dq, dr, ds = abs(q - qf), abs(r - rf), abs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def _pack_axial(q: int, r: int) -> int:
    qo, ro = q + _AXIAL_OFFSET, r + _AXIAL_OFFSET
    if not (0 <= qo < (1 << 32) and 0 <= ro < (1 << 32)):
        raise ValidationError(f"axial coordinates ({q}, {r}) out of packable range")
    return (qo << 32) | ro


def _unpack_axial(cell: int) -> tuple[int, int]:
    if not (0 <= cell < (1 << 64)):
        raise ValidationError(f"invalid cell index {cell}")
    return (cell >> 32) - _AXIAL_OFFSET, (cell & 0xFFFFFFFF) - _AXIAL_OFFSET


def locate_region(lat: float, lon: float) -> RegionId:
    """Map a WGS84 point to the hexagonal cell containing it."""
    _check_coords(lat, lon)
    x, y = _project_km(lat, lon)
    # Pointy-top axial lattice with circumradius HEX_EDGE_KM.
    qf = (_SQRT3 / 3.0 * x - y / 3.0) / HEX_EDGE_KM
    rf = (2.0 / 3.0 * y) / HEX_EDGE_KM
    q, r = _axial_round(qf, rf)
    return RegionId(cell=_pack_axial(q, r))


def region_center(region: RegionId) -> tuple[float, float]:
    """Geographic centroid (lat, lon) of a cell."""
    q, r = _unpack_axial(region.cell)
    x = HEX_EDGE_KM * _SQRT3 * (q + r / 2.0)
    y = HEX_EDGE_KM * 1.5 * r
    return _unproject_km(x, y)


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance using the mean Earth radius 6371.0088 km."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def assign_zip(region: RegionId, table: Sequence[ZipCentroid]) -> str:
    """Zip whose centroid is nearest the region center; ties pick the
    lexicographically smallest zip so the assignment is order-independent."""
    if not table:
        raise ValidationError("zip centroid table is empty")
    lat, lon = region_center(region)
    best = min(table, key=lambda z: (haversine_km(lat, lon, z.lat, z.lon), z.zip))
    return best.zip


def tile_coords(lat: float, lon: float, zoom: int) -> TileCoord:
    """Slippy-map tile containing a point at the given zoom level."""
    if zoom < 0 or zoom > 22:
        raise ValidationError(f"zoom {zoom} out of range")
    _check_coords(lat, max(-180.0, min(180.0, lon)))
    if abs(lat) >= MAX_MERCATOR_LAT:
        raise ValidationError(f"latitude {lat} outside Web-Mercator range")
    n = 1 << zoom
    x = int((lon + 180.0) / 360.0 * n)
    lat_rad = math.radians(lat)
    y = int((1.0 - math.asinh(math.tan(lat_rad)) / math.pi) / 2.0 * n)
    x = min(max(x, 0), n - 1)
    y = min(max(y, 0), n - 1)
    return TileCoord(zoom=zoom, x=x, y=y)

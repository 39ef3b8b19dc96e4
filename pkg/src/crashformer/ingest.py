"""Loaders for the three tabular sources plus the map-tile cache.

CSV schemas (UTF-8, comma separated, `.` decimal, ISO-8601 timestamps
without offset, interpreted as city-local civil time):

  accidents.csv     timestamp,lat,lon,severity,poi_<13 flags>
  weather.csv       station_lat,station_lon,start,end,kind,severity,precipitation_mm
  demographics.csv  zip,lat,lon,f000..f143

Rows that violate an invariant are rejected with a row-numbered diagnostic;
more than 1% rejected rows (or a malformed header) is a hard failure.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import MissingTileError, RuntimeFailure, SchemaError
from .geoindex import RegionId, ZipCentroid, region_center, tile_coords

log = logging.getLogger(__name__)

TILE_SIZE = 256
TILE_ZOOM = 14
DEMO_DIM = 144

# Canonical alphabetical POI order; also the column and feature-slot order.
POI_NAMES = (
    "amenity", "bump", "crossing", "give_way", "junction", "no_exit",
    "railway", "roundabout", "station", "stop", "traffic_calming",
    "traffic_signal", "turning_loop",
)
WEATHER_KINDS = ("rain", "fog", "cold", "snow", "storm", "hail", "other")

ACCIDENT_HEADER = ["timestamp", "lat", "lon", "severity"] + [f"poi_{n}" for n in POI_NAMES]
WEATHER_HEADER = ["station_lat", "station_lon", "start", "end", "kind", "severity", "precipitation_mm"]
DEMOGRAPHICS_HEADER = ["zip", "lat", "lon"] + [f"f{i:03d}" for i in range(DEMO_DIM)]

MAX_REJECT_FRACTION = 0.01

USER_AGENT = "crashformer/0.1 (map-tile cache for accident-risk features)"
_download_slots = threading.Semaphore(2)


@dataclass(frozen=True)
class AccidentRecord:
    timestamp: datetime
    lat: float
    lon: float
    severity: float
    poi_flags: tuple[int, ...]


@dataclass(frozen=True)
class WeatherRecord:
    station_lat: float
    station_lon: float
    start: datetime
    end: datetime
    kind: str
    severity: float
    precipitation: float


@dataclass(frozen=True)
class DemographicRecord:
    zip: str
    lat: float
    lon: float
    features: np.ndarray  # shape (144,), NaN marks missing values


@dataclass
class MapTile:
    region: RegionId
    pixels: np.ndarray  # uint8, exactly 256 x 256 x 3

    def __post_init__(self):
        if self.pixels.shape != (TILE_SIZE, TILE_SIZE, 3) or self.pixels.dtype != np.uint8:
            raise SchemaError(f"tile pixels must be uint8 {TILE_SIZE}x{TILE_SIZE}x3, got "
                              f"{self.pixels.dtype} {self.pixels.shape}")


@dataclass
class LoadResult:
    """Accepted records plus row-numbered diagnostics for rejected ones."""

    records: object
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_accepted(self) -> int:
        return len(self.records)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def _open_rows(path: str | os.PathLike, expected_header: list[str]) -> Iterator[tuple[int, list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {expected_header[:4]}...")
        if header != expected_header:
            raise SchemaError(f"{path}: header mismatch; expected {len(expected_header)} columns "
                              f"starting {expected_header[:4]}, got {len(header)} starting {header[:4]}")
        for row_no, row in enumerate(reader, start=2):
            yield row_no, row


def _parse_ts(text: str) -> datetime:
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is not None:
        raise ValueError("timestamp carries a UTC offset; local civil time expected")
    return ts


def _finish(path, result: LoadResult, n_rows: int) -> LoadResult:
    for row_no, reason in result.rejected:
        log.warning("%s:%d rejected: %s", path, row_no, reason)
    log.info("%s: accepted %d rows, rejected %d", path, result.n_accepted, result.n_rejected)
    if n_rows and result.n_rejected / n_rows > MAX_REJECT_FRACTION:
        raise SchemaError(f"{path}: {result.n_rejected}/{n_rows} rows malformed "
                          f"(> {MAX_REJECT_FRACTION:.0%} threshold)")
    return result


def load_accidents(path: str | os.PathLike) -> LoadResult:
    records: list[AccidentRecord] = []
    rejected: list[tuple[int, str]] = []
    n_rows = 0
    for row_no, row in _open_rows(path, ACCIDENT_HEADER):
        n_rows += 1
        try:
            if len(row) != len(ACCIDENT_HEADER):
                raise ValueError(f"expected {len(ACCIDENT_HEADER)} fields, got {len(row)}")
            ts = _parse_ts(row[0])
            lat, lon, severity = float(row[1]), float(row[2]), float(row[3])
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise ValueError(f"coordinates ({lat}, {lon}) out of range")
            if not (1.0 <= severity <= 4.0):
                raise ValueError(f"severity {severity} outside [1, 4]")
            flags = []
            for name, text in zip(POI_NAMES, row[4:]):
                if text not in ("0", "1"):
                    raise ValueError(f"poi_{name} must be 0 or 1, got {text!r}")
                flags.append(int(text))
            records.append(AccidentRecord(ts, lat, lon, severity, tuple(flags)))
        except ValueError as exc:
            rejected.append((row_no, str(exc)))
    return _finish(path, LoadResult(records, rejected), n_rows)


def load_weather(path: str | os.PathLike) -> LoadResult:
    records: list[WeatherRecord] = []
    rejected: list[tuple[int, str]] = []
    n_rows = 0
    for row_no, row in _open_rows(path, WEATHER_HEADER):
        n_rows += 1
        try:
            if len(row) != len(WEATHER_HEADER):
                raise ValueError(f"expected {len(WEATHER_HEADER)} fields, got {len(row)}")
            slat, slon = float(row[0]), float(row[1])
            start, end = _parse_ts(row[2]), _parse_ts(row[3])
            if end < start:
                raise ValueError(f"end {row[3]} precedes start {row[2]}")
            kind = row[4]
            if kind not in WEATHER_KINDS:
                raise ValueError(f"unknown weather kind {kind!r}")
            severity = float(row[5])
            if not (1.0 <= severity <= 4.0):
                raise ValueError(f"severity {severity} outside [1, 4]")
            precip = float(row[6])
            if not (precip >= 0.0):
                raise ValueError(f"negative precipitation {precip}")
            records.append(WeatherRecord(slat, slon, start, end, kind, severity, precip))
        except ValueError as exc:
            rejected.append((row_no, str(exc)))
    return _finish(path, LoadResult(records, rejected), n_rows)


def load_demographics(path: str | os.PathLike) -> LoadResult:
    records: dict[str, DemographicRecord] = {}
    rejected: list[tuple[int, str]] = []
    n_rows = 0
    for row_no, row in _open_rows(path, DEMOGRAPHICS_HEADER):
        n_rows += 1
        try:
            if len(row) != len(DEMOGRAPHICS_HEADER):
                raise ValueError(f"expected {len(DEMOGRAPHICS_HEADER)} fields, got {len(row)}")
            zip_code = row[0]
            if len(zip_code) != 5 or not zip_code.isdigit():
                raise ValueError(f"zip {zip_code!r} is not a 5-digit code")
            if zip_code in records:
                raise SchemaError(f"{path}: duplicate zip {zip_code} at row {row_no}")
            lat, lon = float(row[1]), float(row[2])
            feats = np.array([float(v) if v != "" else math.nan for v in row[3:]], dtype=np.float64)
            records[zip_code] = DemographicRecord(zip_code, lat, lon, feats)
        except SchemaError:
            raise
        except ValueError as exc:
            rejected.append((row_no, str(exc)))
    return _finish(path, LoadResult(records, rejected), n_rows)


def zip_table(demographics: dict[str, DemographicRecord]) -> list[ZipCentroid]:
    return [ZipCentroid(rec.zip, rec.lat, rec.lon) for rec in sorted(demographics.values(), key=lambda r: r.zip)]


def tile_cache_path(cache_dir: str | os.PathLike, zoom: int, x: int, y: int) -> Path:
    return Path(cache_dir) / str(zoom) / str(x) / f"{y}.png"


def write_tile_png(path: Path, pixels: np.ndarray) -> None:
    """Atomic PNG write: temp file in the target directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp-{os.getpid()}")
    Image.fromarray(pixels, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def _decode_tile(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data)).convert("RGB")
    except Exception as exc:
        raise RuntimeFailure(f"undecodable tile image: {exc}") from exc
    if img.size != (TILE_SIZE, TILE_SIZE):
        img = img.resize((TILE_SIZE, TILE_SIZE), Image.LANCZOS)
    return np.asarray(img, dtype=np.uint8)


def _download(url: str, retries: int = 3, backoff: float = 0.5) -> bytes:
    last_exc: Exception | None = None
    for attempt in range(retries):
        try:
            with _download_slots:
                req = urllib.request.Request(url, headers={"User-Agent": USER_AGENT})
                with urllib.request.urlopen(req, timeout=30) as resp:
                    status = getattr(resp, "status", None)
                    if status is not None and status != 200:
                        raise RuntimeFailure(f"HTTP {status} for {url}")
                    return resp.read()
        except Exception as exc:
            last_exc = exc
            if attempt + 1 < retries:
                time.sleep(backoff * 2 ** attempt)
    raise RuntimeFailure(f"download failed after {retries} attempts: {url}: {last_exc}")


def fetch_tile(region: RegionId, cache_dir: str | os.PathLike, source: str,
               zoom: int = TILE_ZOOM, delay: float = 0.0, retries: int = 3,
               backoff: float = 0.5) -> MapTile:
    """Tile for a region's center, served from `cache_dir/{z}/{x}/{y}.png`.

    `source` is either a URL template containing `{z}`, `{x}`, `{y}` or the
    literal string ``offline``, in which case a cache miss is an error.
    """
    lat, lon = region_center(region)
    tc = tile_coords(lat, lon, zoom)
    path = tile_cache_path(cache_dir, tc.zoom, tc.x, tc.y)
    if path.is_file():
        return MapTile(region, _decode_tile(path.read_bytes()))
    if source == "offline":
        raise MissingTileError(tc.zoom, tc.x, tc.y)
    url = source.format(z=tc.zoom, x=tc.x, y=tc.y)
    if delay > 0:
        time.sleep(delay)
    data = _download(url, retries=retries, backoff=backoff)
    pixels = _decode_tile(data)
    write_tile_png(path, pixels)
    return MapTile(region, pixels)

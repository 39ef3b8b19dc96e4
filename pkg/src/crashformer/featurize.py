"""Aggregation of raw records into 27-dim per-region, per-window features.

Canonical feature layout (fixed for serialization):

  [0..7]   weather: severity_avg, precipitation_avg, rain, fog, cold, snow, storm, hail
  [8..20]  POI flags, alphabetical (see ingest.POI_NAMES)
  [21..24] time: day_of_week/6, day_of_month/31, month/12, is_holiday
  [25..26] accident: severity_avg, occurred

Windows are 6-hour intervals aligned to local civil midnight, four per day.
A weather event counts toward a window when its closed [start, end] span
overlaps the half-open window interval and its station lies within the
association radius of the region center.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, time as dtime, timedelta
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .geoindex import RegionId, haversine_km, locate_region, region_center
from .ingest import AccidentRecord, WeatherRecord, POI_NAMES, WEATHER_KINDS

WINDOW_HOURS = 6
WINDOWS_PER_DAY = 24 // WINDOW_HOURS
N_FEATURES = 27
DEFAULT_WEATHER_RADIUS_KM = 30.0

# Slot indices into the canonical layout.
SLOT_WEATHER_SEVERITY = 0
SLOT_PRECIPITATION = 1
SLOT_WEATHER_KIND = {k: 2 + i for i, k in enumerate(("rain", "fog", "cold", "snow", "storm", "hail"))}
SLOT_POI = {name: 8 + i for i, name in enumerate(POI_NAMES)}
SLOT_DOW, SLOT_DOM, SLOT_MONTH, SLOT_HOLIDAY = 21, 22, 23, 24
SLOT_ACC_SEVERITY = 25
SLOT_OCCURRED = 26

assert set(WEATHER_KINDS) - set(SLOT_WEATHER_KIND) == {"other"}


@dataclass(frozen=True)
class TimeWindow:
    """Ordinal 6-hour interval counted from a midnight-aligned epoch."""

    index: int
    epoch: datetime

    @property
    def start(self) -> datetime:
        return self.epoch + timedelta(hours=WINDOW_HOURS * self.index)

    @property
    def end(self) -> datetime:
        return self.epoch + timedelta(hours=WINDOW_HOURS * (self.index + 1))


def _check_epoch(epoch: datetime) -> None:
    if epoch.time() != dtime(0, 0) or epoch.tzinfo is not None:
        raise ValidationError(f"epoch {epoch} must be a naive local midnight")


def window_index(ts: datetime, epoch: datetime) -> TimeWindow:
    """Window containing `ts`: index = floor((ts - epoch) / 6h)."""
    _check_epoch(epoch)
    if ts < epoch:
        raise ValidationError(f"timestamp {ts} precedes epoch {epoch}")
    delta = ts - epoch
    index = int(delta.total_seconds() // (WINDOW_HOURS * 3600))
    return TimeWindow(index=index, epoch=epoch)


def window_count(epoch: datetime, last_day: date) -> int:
    """Number of windows covering `epoch`'s date through `last_day` inclusive."""
    _check_epoch(epoch)
    days = (last_day - epoch.date()).days + 1
    if days <= 0:
        raise ValidationError(f"last day {last_day} precedes epoch {epoch}")
    return days * WINDOWS_PER_DAY


def _nth_weekday(year: int, month: int, weekday: int, n: int) -> date:
    d = date(year, month, 1)
    offset = (weekday - d.weekday()) % 7
    return d + timedelta(days=offset + 7 * (n - 1))


def _last_weekday(year: int, month: int, weekday: int) -> date:
    nxt = date(year + 1, 1, 1) if month == 12 else date(year, month + 1, 1)
    d = nxt - timedelta(days=1)
    return d - timedelta(days=(d.weekday() - weekday) % 7)


def us_federal_holidays(year: int) -> frozenset[date]:
    """Rule-computed US federal holidays; no observed-day shifting.
    Juneteenth enters the list in 2021, the year it was established."""
    days = {
        date(year, 1, 1),
        _nth_weekday(year, 1, 0, 3),    # MLK Day, 3rd Monday of January
        _nth_weekday(year, 2, 0, 3),    # Washington's Birthday
        _last_weekday(year, 5, 0),      # Memorial Day
        date(year, 7, 4),
        _nth_weekday(year, 9, 0, 1),    # Labor Day
        _nth_weekday(year, 10, 0, 2),   # Columbus Day
        date(year, 11, 11),
        _nth_weekday(year, 11, 3, 4),   # Thanksgiving, 4th Thursday
        date(year, 12, 25),
    }
    if year >= 2021:
        days.add(date(year, 6, 19))
    return frozenset(days)


def time_features(window: TimeWindow) -> tuple[int, int, int, int]:
    """(day_of_week Monday=0, day_of_month, month, is_holiday) of the window start."""
    d = window.start.date()
    return d.weekday(), d.day, d.month, int(d in us_federal_holidays(d.year))


def _weather_overlaps(rec: WeatherRecord, window: TimeWindow) -> bool:
    return rec.start < window.end and rec.end >= window.start


def build_feature(region: RegionId, window: TimeWindow,
                  accidents: Sequence[AccidentRecord],
                  weather: Sequence[WeatherRecord],
                  radius_km: float = DEFAULT_WEATHER_RADIUS_KM) -> np.ndarray:
    """27-dim aggregate for one (region, window) cell.

    `accidents` must already be the cell's accidents; `weather` may be any
    superset of candidate events, filtered here by station distance and
    window overlap. Absent data leaves zeros plus the time features.
    """
    out = np.zeros(N_FEATURES, dtype=np.float64)
    lat, lon = region_center(region)

    w_sev = w_prec = 0.0
    w_count = 0
    for rec in weather:
        if haversine_km(lat, lon, rec.station_lat, rec.station_lon) > radius_km:
            continue
        if not _weather_overlaps(rec, window):
            continue
        w_sev += rec.severity
        w_prec += rec.precipitation
        w_count += 1
        slot = SLOT_WEATHER_KIND.get(rec.kind)
        if slot is not None:
            out[slot] = 1.0
    if w_count:
        out[SLOT_WEATHER_SEVERITY] = w_sev / w_count
        out[SLOT_PRECIPITATION] = w_prec / w_count

    a_sev = 0.0
    for rec in accidents:
        a_sev += rec.severity
        for name, flag in zip(POI_NAMES, rec.poi_flags):
            if flag:
                out[SLOT_POI[name]] = 1.0
    if accidents:
        out[SLOT_ACC_SEVERITY] = a_sev / len(accidents)
        out[SLOT_OCCURRED] = 1.0

    dow, dom, month, holiday = time_features(window)
    out[SLOT_DOW] = dow / 6.0
    out[SLOT_DOM] = dom / 31.0
    out[SLOT_MONTH] = month / 12.0
    out[SLOT_HOLIDAY] = float(holiday)
    return out


def label(region: RegionId, window: TimeWindow, accidents: Iterable[AccidentRecord]) -> int:
    """1 iff at least one accident maps to (region, window)."""
    for rec in accidents:
        if locate_region(rec.lat, rec.lon) == region:
            if window_index(rec.timestamp, window.epoch).index == window.index:
                return 1
    return 0


@dataclass
class FeatureTable:
    """Dense per-region, per-window features and labels.

    Regions are ordered by ascending cell index; `features` has shape
    (R, T, 27) and `labels` (R, T).
    """

    regions: list[RegionId]
    epoch: datetime
    n_windows: int
    features: np.ndarray
    labels: np.ndarray

    def region_row(self, region: RegionId) -> int:
        return self._index[region]

    def __post_init__(self):
        self._index = {r: i for i, r in enumerate(self.regions)}


def build_feature_table(accidents: Sequence[AccidentRecord],
                        weather: Sequence[WeatherRecord],
                        epoch: datetime, n_windows: int,
                        radius_km: float = DEFAULT_WEATHER_RADIUS_KM) -> FeatureTable:
    """Aggregate every (region, window) cell over the study horizon.

    The region set is every cell containing at least one in-horizon
    accident. Cells without data still get their time features.
    """
    _check_epoch(epoch)
    horizon_end = epoch + timedelta(hours=WINDOW_HOURS * n_windows)

    bucketed: dict[tuple[int, int], list[AccidentRecord]] = {}
    cells: set[RegionId] = set()
    for rec in accidents:
        if not (epoch <= rec.timestamp < horizon_end):
            continue
        region = locate_region(rec.lat, rec.lon)
        w = window_index(rec.timestamp, epoch).index
        cells.add(region)
        bucketed.setdefault((region.cell, w), []).append(rec)
    if not cells:
        raise ValidationError("no accidents fall inside the study horizon")

    regions = sorted(cells, key=lambda r: r.cell)
    features = np.zeros((len(regions), n_windows, N_FEATURES), dtype=np.float64)
    labels = np.zeros((len(regions), n_windows), dtype=np.uint8)

    for i, region in enumerate(regions):
        lat, lon = region_center(region)
        nearby = [rec for rec in weather
                  if haversine_km(lat, lon, rec.station_lat, rec.station_lon) <= radius_km]
        for w in range(n_windows):
            window = TimeWindow(index=w, epoch=epoch)
            cell_acc = bucketed.get((region.cell, w), ())
            features[i, w] = build_feature(region, window, cell_acc, nearby, radius_km)
            labels[i, w] = 1 if cell_acc else 0
    return FeatureTable(regions=regions, epoch=epoch, n_windows=n_windows,
                        features=features, labels=labels)

"""Deterministic synthetic-world generator with controllable planted signal.

The generator emits exactly the ingest CSV schemas plus a populated tile
cache, so the whole pipeline can run hermetically. Per region r and
window w the accident probability is

    sigmoid(logit(base_rate) + w_hist * recent + w_weather * storm
            + w_demo * risk_r + w_img * density_r)

where `recent` counts accidents in the previous four windows, `storm` is 1
when a storm event at a station within the weather radius overlaps w,
`risk_r` is demographic feature 0, and `density_r` drives the number of
line segments drawn on the region's map tile. Ground-truth probabilities
land in `truth.json` keyed by region cell.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .errors import ValidationError
from .featurize import DEFAULT_WEATHER_RADIUS_KM, WINDOW_HOURS, WINDOWS_PER_DAY
from .geoindex import RegionId, haversine_km, locate_region, region_center, tile_coords
from .ingest import (ACCIDENT_HEADER, DEMOGRAPHICS_HEADER, POI_NAMES, TILE_ZOOM,
                     WEATHER_HEADER, write_tile_png, tile_cache_path)

MAX_TILE_LINES = 40


@dataclass
class WorldConfig:
    n_regions: int = 20
    n_days: int = 30
    seed: int = 0
    base_rate: float = 0.05
    w_hist: float = 0.0
    w_weather: float = 0.0
    w_demo: float = 0.0
    w_img: float = 0.0
    bbox: tuple[float, float, float, float] = (29.55, 30.05, -95.80, -95.20)
    start_day: date = field(default_factory=lambda: date(2021, 1, 4))
    storm_fraction: float = 0.25
    # None draws risk from U(-1,1) and density from U(0,1); a tuple of
    # levels instead assigns each region one level uniformly at random,
    # which plants rate classes that short histories cannot separate.
    risk_levels: Optional[tuple[float, ...]] = None
    density_levels: Optional[tuple[float, ...]] = None
    # Scale of the 143 non-signal demographic features. Zero removes the
    # per-region fingerprint so ablation arms cannot re-identify regions
    # through an uninformative modality.
    demo_noise_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.base_rate < 1.0):
            raise ValidationError(f"base_rate {self.base_rate} outside (0, 1)")
        if self.n_regions < 2:
            raise ValidationError("need at least 2 regions")
        if min(self.w_hist, self.w_weather, self.w_demo, self.w_img) < 0:
            raise ValidationError("signal weights must be non-negative")
        if self.density_levels is not None and not all(0 <= v <= 1 for v in self.density_levels):
            raise ValidationError("density levels must lie in [0, 1]")

    @property
    def n_windows(self) -> int:
        return self.n_days * WINDOWS_PER_DAY

    @property
    def epoch(self) -> datetime:
        return datetime.combine(self.start_day, datetime.min.time())


@dataclass
class WorldTruth:
    """Generator bookkeeping kept in memory for tests and oracles."""

    regions: list[RegionId]
    centers: list[tuple[float, float]]
    epoch: datetime
    n_windows: int
    probs: np.ndarray        # (R, T)
    labels: np.ndarray       # (R, T) uint8
    risk: np.ndarray         # (R,)
    density: np.ndarray      # (R,)
    line_counts: np.ndarray  # (R,)
    storm_flags: np.ndarray  # (R, T) uint8


def _pick_regions(cfg: WorldConfig) -> tuple[list[RegionId], list[tuple[float, float]]]:
    """Grid of well-separated seed points, each in its own cell and its own
    zoom-14 tile, all within the weather radius of the bbox center."""
    lat_min, lat_max, lon_min, lon_max = cfg.bbox
    c_lat, c_lon = (lat_min + lat_max) / 2, (lon_min + lon_max) / 2
    step_lat, step_lon = 0.050, 0.055
    regions, centers = [], []
    seen_cells, seen_tiles = set(), set()
    lat = lat_min
    while lat <= lat_max and len(regions) < cfg.n_regions:
        lon = lon_min
        while lon <= lon_max and len(regions) < cfg.n_regions:
            if haversine_km(lat, lon, c_lat, c_lon) <= DEFAULT_WEATHER_RADIUS_KM - 2.0:
                region = locate_region(lat, lon)
                tc = tile_coords(*region_center(region), TILE_ZOOM)
                if region.cell not in seen_cells and (tc.x, tc.y) not in seen_tiles:
                    seen_cells.add(region.cell)
                    seen_tiles.add((tc.x, tc.y))
                    regions.append(region)
                    centers.append(region_center(region))
            lon += step_lon
        lat += step_lat
    if len(regions) < cfg.n_regions:
        raise ValidationError(f"bbox {cfg.bbox} too small for {cfg.n_regions} regions "
                              f"(placed {len(regions)})")
    return regions, centers


def _draw_tile(rng: np.random.Generator, n_lines: int) -> np.ndarray:
    img = Image.new("RGB", (256, 256), (242, 239, 233))
    draw = ImageDraw.Draw(img)
    for _ in range(n_lines):
        x0, y0, x1, y1 = rng.integers(0, 256, size=4)
        width = int(rng.integers(1, 4))
        draw.line((int(x0), int(y0), int(x1), int(y1)), fill=(120, 120, 125), width=width)
    return np.asarray(img, dtype=np.uint8)


def _iso(ts: datetime) -> str:
    return ts.isoformat(sep="T", timespec="seconds")


def generate_world(cfg: WorldConfig, out_dir: str | Path) -> WorldTruth:
    """Write accidents.csv, weather.csv, demographics.csv, tiles/ and
    truth.json under `out_dir`; returns the bookkeeping."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    regions, centers = _pick_regions(cfg)
    n_r, n_w = cfg.n_regions, cfg.n_windows
    epoch = cfg.epoch

    if cfg.risk_levels is None:
        risk = rng.uniform(-1.0, 1.0, size=n_r)
    else:
        risk = np.array(cfg.risk_levels)[rng.integers(0, len(cfg.risk_levels), size=n_r)]
    if cfg.density_levels is None:
        density = rng.uniform(0.0, 1.0, size=n_r)
    else:
        density = np.array(cfg.density_levels)[rng.integers(0, len(cfg.density_levels), size=n_r)]

    # Two stations near the bbox center so every region sits inside the
    # weather association radius of both.
    lat_min, lat_max, lon_min, lon_max = cfg.bbox
    c_lat, c_lon = (lat_min + lat_max) / 2, (lon_min + lon_max) / 2
    stations = [(c_lat + 0.01, c_lon - 0.01), (c_lat - 0.01, c_lon + 0.01)]

    weather_rows = []
    station_storm = np.zeros((len(stations), n_w), dtype=np.uint8)
    horizon_hours = n_w * WINDOW_HOURS
    n_storms = max(1, int(cfg.storm_fraction * horizon_hours / 18.0))
    for si, (s_lat, s_lon) in enumerate(stations):
        for _ in range(n_storms):
            start_h = float(rng.uniform(0, horizon_hours - 1))
            dur_h = float(rng.uniform(12.0, 30.0))
            start = epoch + timedelta(hours=start_h)
            end = min(start + timedelta(hours=dur_h), epoch + timedelta(hours=horizon_hours - 0.01))
            severity = int(rng.integers(2, 5))
            precip = float(np.round(rng.uniform(0.5, 12.0), 2))
            weather_rows.append((s_lat, s_lon, start, end, "storm", severity, precip))
            w0 = int(start_h // WINDOW_HOURS)
            w1 = min(int((end - epoch).total_seconds() // (WINDOW_HOURS * 3600)), n_w - 1)
            station_storm[si, w0:w1 + 1] = 1
        for _ in range(n_storms):
            start_h = float(rng.uniform(0, horizon_hours - 1))
            start = epoch + timedelta(hours=start_h)
            end = start + timedelta(hours=float(rng.uniform(2.0, 8.0)))
            end = min(end, epoch + timedelta(hours=horizon_hours - 0.01))
            kind = str(rng.choice(["rain", "fog", "cold"]))
            severity = int(rng.integers(1, 4))
            precip = float(np.round(rng.uniform(0.0, 4.0), 2)) if kind == "rain" else 0.0
            weather_rows.append((s_lat, s_lon, start, end, kind, severity, precip))
    weather_rows.sort(key=lambda r: r[2])

    # Stations are interchangeable for the storm flag: all regions lie
    # within the radius of both, so the flag is the OR over stations.
    storm_any = station_storm.max(axis=0)
    storm_flags = np.tile(storm_any, (n_r, 1)).astype(np.uint8)

    logit_base = math.log(cfg.base_rate / (1.0 - cfg.base_rate))
    probs = np.zeros((n_r, n_w), dtype=np.float64)
    labels = np.zeros((n_r, n_w), dtype=np.uint8)
    for w in range(n_w):
        recent = labels[:, max(0, w - 4):w].sum(axis=1).astype(np.float64)
        z = (logit_base + cfg.w_hist * recent + cfg.w_weather * storm_flags[:, w]
             + cfg.w_demo * risk + cfg.w_img * density)
        p = 1.0 / (1.0 + np.exp(-z))
        probs[:, w] = p
        labels[:, w] = rng.random(n_r) < p

    # Accidents: at least one per positive cell, timestamps inside the
    # window, positions jittered but guaranteed to stay in the cell.
    accident_rows = []
    for w in range(n_w):
        w_start = epoch + timedelta(hours=WINDOW_HOURS * w)
        for ri in range(n_r):
            if not labels[ri, w]:
                continue
            n_acc = 1 + int(rng.poisson(0.3))
            lat_c, lon_c = centers[ri]
            for _ in range(n_acc):
                ts = w_start + timedelta(seconds=float(rng.uniform(0, WINDOW_HOURS * 3600 - 1)))
                lat = lat_c + float(rng.uniform(-0.002, 0.002))
                lon = lon_c + float(rng.uniform(-0.002, 0.002))
                if locate_region(lat, lon).cell != regions[ri].cell:
                    lat, lon = lat_c, lon_c
                severity = int(rng.integers(1, 5))
                flags = (rng.random(len(POI_NAMES)) < 0.08).astype(int)
                accident_rows.append((ts, lat, lon, severity, flags))

    with open(out / "accidents.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ACCIDENT_HEADER)
        for ts, lat, lon, severity, flags in accident_rows:
            writer.writerow([_iso(ts), f"{lat:.6f}", f"{lon:.6f}", severity, *flags.tolist()])

    with open(out / "weather.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(WEATHER_HEADER)
        for s_lat, s_lon, start, end, kind, severity, precip in weather_rows:
            writer.writerow([f"{s_lat:.6f}", f"{s_lon:.6f}", _iso(start), _iso(end),
                             kind, severity, f"{precip:.2f}"])

    with open(out / "demographics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DEMOGRAPHICS_HEADER)
        for ri in range(n_r):
            feats = cfg.demo_noise_scale * rng.normal(0.0, 1.0, size=144)
            feats[0] = risk[ri]
            lat_c, lon_c = centers[ri]
            writer.writerow([f"{10000 + ri:05d}", f"{lat_c:.6f}", f"{lon_c:.6f}",
                             *[f"{v:.6f}" for v in feats]])

    # Tiles are a pure function of (seed, line count): regions with equal
    # road density render pixel-identical maps, so tiles carry the density
    # signal and nothing else.
    line_counts = np.maximum(1, np.round(density * MAX_TILE_LINES)).astype(int)
    cache_root = out / "tiles"
    for ri, region in enumerate(regions):
        tile_rng = np.random.default_rng((cfg.seed, 777, int(line_counts[ri])))
        pixels = _draw_tile(tile_rng, int(line_counts[ri]))
        tc = tile_coords(*centers[ri], TILE_ZOOM)
        write_tile_png(tile_cache_path(cache_root, tc.zoom, tc.x, tc.y), pixels)

    truth = {str(r.cell): probs[ri].tolist() for ri, r in enumerate(regions)}
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True), encoding="utf-8")

    return WorldTruth(regions=regions, centers=centers, epoch=epoch, n_windows=n_w,
                      probs=probs, labels=labels, risk=risk, density=density,
                      line_counts=line_counts, storm_flags=storm_flags)


def expected_f1_at(p: np.ndarray, threshold: float) -> float:
    """Expected-count F1 for predicting 1 wherever p >= threshold when
    labels are independent Bernoulli(p)."""
    pred = p >= threshold
    etp = float(p[pred].sum())
    efp = float((1.0 - p[pred]).sum())
    efn = float(p[~pred].sum())
    denom = 2.0 * etp + efp + efn
    return 2.0 * etp / denom if denom > 0 else 0.0


def world_oracle(out_dir: str | Path) -> dict:
    """Achievable-F1 report from the planted probabilities.

    `bayes_f1_1` scores the posterior-argmax classifier (predict 1 iff
    p >= 0.5); `best_threshold_f1_1` sweeps every distinct probability as
    a threshold and keeps the maximum expected F1.
    """
    truth_path = Path(out_dir) / "truth.json"
    if not truth_path.is_file():
        raise ValidationError(f"no truth.json under {out_dir}")
    truth = json.loads(truth_path.read_text(encoding="utf-8"))
    p = np.concatenate([np.asarray(v, dtype=np.float64) for v in truth.values()])

    bayes = expected_f1_at(p, 0.5)
    best_f1, best_thr = 0.0, math.inf
    for thr in np.unique(p):
        f1 = expected_f1_at(p, thr)
        if f1 > best_f1:
            best_f1, best_thr = f1, float(thr)
    return {
        "n_cells": int(p.size),
        "expected_positive_rate": float(p.mean()),
        "bayes_f1_1": bayes,
        "best_threshold_f1_1": best_f1,
        "best_threshold": best_thr,
    }

"""Training-ready sample assembly, splits, normalization, and persistence.

Samples live in a `SampleSet`: parallel arrays ordered region-major
(ascending cell index) then by target window. The on-disk container is
a JSON manifest plus little-endian blobs; reads validate byte lengths
against the manifest and round-trip element-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SchemaError, ValidationError
from .featurize import FeatureTable, N_FEATURES, TimeWindow
from .geoindex import RegionId, assign_zip
from .ingest import DemographicRecord, DEMO_DIM, zip_table

CONTAINER_VERSION = 1
TILE_SHAPE = (256, 256, 3)


@dataclass(frozen=True)
class Sample:
    region: RegionId
    target_window: TimeWindow
    history: np.ndarray          # (K, 27)
    label: int
    tile_ref: Optional[int] = None
    demo: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SplitSpec:
    kind: str                    # random | temporal | spatial
    seed: int = 0
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)
    cutoff: Optional[datetime] = None
    region_fraction: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("random", "temporal", "spatial"):
            raise ValidationError(f"unknown split kind {self.kind!r}")
        if self.kind == "random" and abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValidationError(f"ratios {self.ratios} do not sum to 1")
        if self.kind == "temporal" and self.cutoff is None:
            raise ValidationError("temporal split needs a cutoff date")
        if self.kind == "spatial":
            if self.region_fraction is None or not (0.0 < self.region_fraction < 1.0):
                raise ValidationError(f"region_fraction {self.region_fraction} outside (0, 1)")


@dataclass(frozen=True)
class ClassWeights:
    w0: float
    w1: float

    def __post_init__(self):
        if not (self.w0 > 0 and self.w1 > 0):
            raise ValidationError(f"class weights must be positive, got ({self.w0}, {self.w1})")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    spec: SplitSpec


@dataclass
class SampleSet:
    """Column-wise sample store; one row per (region, target window)."""

    k: int
    epoch: datetime
    regions: np.ndarray          # (n,) uint64 cell per sample
    windows: np.ndarray          # (n,) uint32 target window index
    seq: np.ndarray              # (n, K, 27) float32
    labels: np.ndarray           # (n,) uint8
    unique_regions: list[RegionId]
    demo: Optional[np.ndarray] = None          # (n, 144) float32
    tile_refs: Optional[np.ndarray] = None     # (n,) int32 into tile_paths
    tile_paths: Optional[list[str]] = None     # per unique region
    split: Optional[Split] = None
    norm_stats: Optional[NormStats] = None
    class_weights: Optional[ClassWeights] = None

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> Sample:
        return Sample(
            region=RegionId(cell=int(self.regions[i])),
            target_window=TimeWindow(index=int(self.windows[i]), epoch=self.epoch),
            history=self.seq[i],
            label=int(self.labels[i]),
            tile_ref=None if self.tile_refs is None else int(self.tile_refs[i]),
            demo=None if self.demo is None else self.demo[i],
        )

    def subset_indices(self, name: str) -> np.ndarray:
        if self.split is None:
            raise ValidationError("sample set has no split assigned")
        return getattr(self.split, name)


def assemble_samples(table: FeatureTable, k: int) -> SampleSet:
    """One sample per (region, window) with window >= K; the history is the
    K immediately preceding windows, never crossing a region boundary."""
    if k < 1:
        raise ValidationError(f"history length K={k} must be >= 1")
    if table.n_windows < k + 1:
        raise ValidationError(f"K={k} too large for {table.n_windows} windows")

    n_regions = len(table.regions)
    per_region = table.n_windows - k
    n = n_regions * per_region

    windows = np.tile(np.arange(k, table.n_windows, dtype=np.uint32), n_regions)
    regions = np.repeat(np.array([r.cell for r in table.regions], dtype=np.uint64), per_region)

    seq = np.empty((n, k, N_FEATURES), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    row = 0
    for ri in range(n_regions):
        for w in range(k, table.n_windows):
            seq[row] = table.features[ri, w - k:w]
            labels[row] = table.labels[ri, w]
            row += 1
    return SampleSet(k=k, epoch=table.epoch, regions=regions, windows=windows,
                     seq=seq, labels=labels, unique_regions=list(table.regions))


def split(samples: SampleSet, spec: SplitSpec) -> Split:
    """Disjoint, exhaustive train/val/test partition of sample indices."""
    n = len(samples)
    if n == 0:
        raise ValidationError("cannot split an empty sample set")
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "random":
        perm = rng.permutation(n)
        n_train = int(n * spec.ratios[0])
        n_val = int(n * spec.ratios[1])
        parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])

    elif spec.kind == "temporal":
        cutoff_w = _window_floor(samples.epoch, spec.cutoff)
        pre = np.flatnonzero(samples.windows < cutoff_w)
        post = np.flatnonzero(samples.windows >= cutoff_w)
        pre_windows = np.unique(samples.windows[pre])
        if len(pre_windows) == 0 or len(post) == 0:
            raise ValidationError(f"cutoff {spec.cutoff} leaves an empty temporal side")
        n_val_w = max(1, len(pre_windows) // 8)
        val_windows = pre_windows[-n_val_w:]
        val_mask = np.isin(samples.windows[pre], val_windows)
        parts = (pre[~val_mask], pre[val_mask], post)

    else:  # spatial
        cells = np.array([r.cell for r in samples.unique_regions], dtype=np.uint64)
        perm = rng.permutation(len(cells))
        n_train_regions = round(spec.region_fraction * len(cells))
        if n_train_regions == 0 or n_train_regions == len(cells):
            raise ValidationError(f"region_fraction {spec.region_fraction} leaves an empty side")
        train_side_cells = cells[perm[:n_train_regions]]
        side_mask = np.isin(samples.regions, train_side_cells)
        side = np.flatnonzero(side_mask)
        test = np.flatnonzero(~side_mask)
        side = side[rng.permutation(len(side))]
        n_val = max(1, len(side) // 8)
        parts = (side[n_val:], side[:n_val], test)

    train, val, test = (np.sort(p).astype(np.int64) for p in parts)
    if min(len(train), len(val), len(test)) == 0:
        raise ValidationError(f"degenerate {spec.kind} split: empty part "
                              f"({len(train)}/{len(val)}/{len(test)})")
    return Split(train=train, val=val, test=test, spec=spec)


def _window_floor(epoch: datetime, cutoff: datetime) -> int:
    delta = (cutoff - epoch).total_seconds()
    if delta <= 0:
        raise ValidationError(f"cutoff {cutoff} not after epoch {epoch}")
    return math.ceil(delta / (6 * 3600))


def train_regions(samples: SampleSet) -> list[RegionId]:
    """Unique regions appearing on the train+val side of the split."""
    idx = np.concatenate([samples.subset_indices("train"), samples.subset_indices("val")])
    cells = np.unique(samples.regions[idx])
    return [RegionId(cell=int(c)) for c in cells]


def class_weights(labels: np.ndarray, override: Optional[tuple[float, float]] = None) -> ClassWeights:
    """Inverse-frequency weights w_c = N / (2 N_c), unless overridden."""
    if override is not None:
        return ClassWeights(w0=float(override[0]), w1=float(override[1]))
    labels = np.asarray(labels)
    n = len(labels)
    n1 = int(labels.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValidationError("training labels contain a single class")
    return ClassWeights(w0=n / (2.0 * n0), w1=n / (2.0 * n1))


def normalize_demographics(records: dict[str, DemographicRecord],
                           regions: list[RegionId]) -> tuple[dict[str, np.ndarray], NormStats]:
    """Z-score each of the 144 features over the given (training-side)
    regions' zip vectors; zero-variance features and NaNs map to 0."""
    if len(regions) < 2:
        raise ValidationError("need at least 2 training regions to normalize")
    table = zip_table(records)
    region_zip = {r: assign_zip(r, table) for r in regions}
    train_mat = np.stack([records[region_zip[r]].features for r in regions])

    with np.errstate(invalid="ignore"):
        mean = np.nanmean(train_mat, axis=0)
        std = np.nanstd(train_mat, axis=0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    std = np.where(np.isfinite(std), std, 0.0)

    normalized = {}
    for z, rec in records.items():
        vec = np.where(std > 0, (rec.features - mean) / np.where(std > 0, std, 1.0), 0.0)
        normalized[z] = np.where(np.isfinite(vec), vec, 0.0)
    return normalized, NormStats(mean=mean, std=std)


def attach_demographics(samples: SampleSet, records: dict[str, DemographicRecord],
                        normalized: dict[str, np.ndarray]) -> SampleSet:
    table = zip_table(records)
    by_cell = {r.cell: normalized[assign_zip(r, table)] for r in samples.unique_regions}
    demo = np.stack([by_cell[int(c)] for c in samples.regions]).astype(np.float32)
    samples.demo = demo
    return samples


def attach_tiles(samples: SampleSet, tile_paths: dict[int, str]) -> SampleSet:
    """Bind per-region tile cache paths; refs index the unique-region list."""
    paths = []
    for r in samples.unique_regions:
        if r.cell not in tile_paths:
            raise ValidationError(f"no tile path for region cell {r.cell}")
        paths.append(tile_paths[r.cell])
    cell_to_ref = {r.cell: i for i, r in enumerate(samples.unique_regions)}
    samples.tile_paths = paths
    samples.tile_refs = np.array([cell_to_ref[int(c)] for c in samples.regions], dtype=np.int32)
    return samples


def percent_floor2(rate: float) -> float:
    """Percentage truncated (not rounded) to 2 decimals."""
    return math.floor(rate * 10000.0) / 100.0


def stats_report(samples: SampleSet) -> dict:
    n = len(samples)
    n_pos = int(samples.labels.sum())
    rate = n_pos / n if n else 0.0
    per_region = {}
    for r in samples.unique_regions:
        mask = samples.regions == np.uint64(r.cell)
        cnt = int(mask.sum())
        per_region[str(r.cell)] = float(samples.labels[mask].sum() / cnt) if cnt else 0.0
    return {
        "n_samples": n,
        "n_positive": n_pos,
        "positive_rate": rate,
        "positive_rate_pct": percent_floor2(rate),
        "per_region_rates": per_region,
    }


def _blob(path: Path, expected_bytes: int) -> bytes:
    data = path.read_bytes()
    if len(data) != expected_bytes:
        raise SchemaError(f"{path.name}: expected {expected_bytes} bytes, found {len(data)}")
    return data


def write_dataset(samples: SampleSet, out_dir: str | Path) -> dict:
    """Persist the container; returns the manifest written."""
    for name in ("demo", "tile_refs", "tile_paths", "split", "norm_stats", "class_weights"):
        if getattr(samples, name) is None:
            raise ValidationError(f"sample set is missing {name}; bind it before writing")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(samples)

    manifest = {
        "version": CONTAINER_VERSION,
        "n_samples": n,
        "k": samples.k,
        "n_features": N_FEATURES,
        "demo_dim": DEMO_DIM,
        "tile_shape": list(TILE_SHAPE),
        "epoch": samples.epoch.isoformat(),
        "split": {
            "kind": samples.split.spec.kind,
            "seed": samples.split.spec.seed,
            "cutoff": samples.split.spec.cutoff.isoformat() if samples.split.spec.cutoff else None,
            "region_fraction": samples.split.spec.region_fraction,
            "train": samples.split.train.tolist(),
            "val": samples.split.val.tolist(),
            "test": samples.split.test.tolist(),
        },
        "normalization": {
            "mean": samples.norm_stats.mean.tolist(),
            "std": samples.norm_stats.std.tolist(),
        },
        "class_weights": {"w0": samples.class_weights.w0, "w1": samples.class_weights.w1},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    samples.seq.astype("<f4").tofile(out / "seq.f32")
    samples.demo.astype("<f4").tofile(out / "demo.f32")
    samples.labels.astype("<u1").tofile(out / "labels.u8")
    samples.regions.astype("<u8").tofile(out / "regions.u64")
    samples.windows.astype("<u4").tofile(out / "windows.u32")
    tiles = {str(r.cell): samples.tile_paths[i] for i, r in enumerate(samples.unique_regions)}
    (out / "tiles.json").write_text(json.dumps(tiles, sort_keys=True, indent=1), encoding="utf-8")
    return manifest


def read_dataset(in_dir: str | Path) -> SampleSet:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"no manifest.json in {src}")
    if manifest.get("version") != CONTAINER_VERSION:
        raise SchemaError(f"container version {manifest.get('version')} != {CONTAINER_VERSION}")
    n = manifest["n_samples"]
    k = manifest["k"]
    if manifest["n_features"] != N_FEATURES or manifest["demo_dim"] != DEMO_DIM:
        raise SchemaError("manifest feature dimensions do not match this build")

    seq = np.frombuffer(_blob(src / "seq.f32", n * k * N_FEATURES * 4), dtype="<f4")
    demo = np.frombuffer(_blob(src / "demo.f32", n * DEMO_DIM * 4), dtype="<f4")
    labels = np.frombuffer(_blob(src / "labels.u8", n), dtype="<u1")
    regions = np.frombuffer(_blob(src / "regions.u64", n * 8), dtype="<u8")
    windows = np.frombuffer(_blob(src / "windows.u32", n * 4), dtype="<u4")
    tiles = json.loads((src / "tiles.json").read_text(encoding="utf-8"))

    unique_regions = [RegionId(cell=int(c)) for c in sorted(np.unique(regions).tolist())]
    cell_to_ref = {r.cell: i for i, r in enumerate(unique_regions)}
    tile_paths = [tiles[str(r.cell)] for r in unique_regions]

    sp = manifest["split"]
    spec_kwargs = {"kind": sp["kind"], "seed": sp["seed"]}
    if sp.get("cutoff"):
        spec_kwargs["cutoff"] = datetime.fromisoformat(sp["cutoff"])
    if sp.get("region_fraction") is not None:
        spec_kwargs["region_fraction"] = sp["region_fraction"]
    norm = manifest["normalization"]
    return SampleSet(
        k=k,
        epoch=datetime.fromisoformat(manifest["epoch"]),
        regions=regions.copy(),
        windows=windows.copy(),
        seq=seq.reshape(n, k, N_FEATURES).copy(),
        labels=labels.copy(),
        unique_regions=unique_regions,
        demo=demo.reshape(n, DEMO_DIM).copy(),
        tile_refs=np.array([cell_to_ref[int(c)] for c in regions], dtype=np.int32),
        tile_paths=tile_paths,
        split=Split(train=np.array(sp["train"], dtype=np.int64),
                    val=np.array(sp["val"], dtype=np.int64),
                    test=np.array(sp["test"], dtype=np.int64),
                    spec=SplitSpec(**spec_kwargs)),
        norm_stats=NormStats(mean=np.array(norm["mean"]), std=np.array(norm["std"])),
        class_weights=ClassWeights(**manifest["class_weights"]),
    )

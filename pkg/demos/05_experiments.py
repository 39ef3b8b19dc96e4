"""
Running an experiment protocol end to end
=========================================

The modality-ablation protocol on a small world: four arms sharing one
split and seed, per-arm prediction dumps, a JSON report, and rendered
CSV + bar-chart outputs. The same runner also covers the history-length
sweep and the temporal/spatial holdouts against the baselines.
"""

import json
import tempfile
from pathlib import Path

from crashformer.dataset import (SplitSpec, assemble_samples, attach_demographics,
                                 attach_tiles, class_weights, normalize_demographics,
                                 split, train_regions)
from crashformer.evaluation import ExperimentConfig, report_render, run_experiment
from crashformer.featurize import build_feature_table
from crashformer.geoindex import region_center, tile_coords
from crashformer.ingest import load_accidents, load_demographics, load_weather
from crashformer.model import ModelConfig
from crashformer.synth import WorldConfig, generate_world
from crashformer.train import ClassWeights, TrainConfig

root = Path(tempfile.mkdtemp(prefix="experiment_demo_"))
truth = generate_world(WorldConfig(n_regions=8, n_days=15, seed=2, base_rate=0.15,
                                   w_demo=1.5, w_img=1.5), root)

accidents = load_accidents(root / "accidents.csv")
weather = load_weather(root / "weather.csv")
demographics = load_demographics(root / "demographics.csv")
table = build_feature_table(accidents.records, weather.records, truth.epoch, truth.n_windows)
samples = assemble_samples(table, k=4)
samples.split = split(samples, SplitSpec(kind="random", seed=0))
samples.class_weights = class_weights(samples.labels[samples.split.train])
normalized, stats = normalize_demographics(demographics.records, train_regions(samples))
samples.norm_stats = stats
attach_demographics(samples, demographics.records, normalized)
attach_tiles(samples, {r.cell: "14/{0.x}/{0.y}.png".format(tile_coords(*region_center(r), 14))
                       for r in samples.unique_regions})

cfg = ExperimentConfig(
    out_dir=root / "runs" / "ablation",
    cache_dir=root / "tiles",
    model=ModelConfig(seq_len=4, d_model=16, n_enc_layers=1, img_size=16,
                      img_channels=[4, 6, 8], demo_hidden=16, clf_hidden=32, dropout=0.0),
    train=TrainConfig(max_epochs=2, batch_size=128, seed=0,
                      class_weights=ClassWeights(1.0, 1.0)),
)
report = run_experiment("ablation", samples, cfg)

print("arms:")
for name, metrics in report.arms.items():
    print(f"  {name:9} f1_1={metrics.f1_1:.4f} f1_0={metrics.f1_0:.4f} n={metrics.n}")
print("improvements (% relative, full vs ablated):")
print(json.dumps(report.improvements, indent=1, sort_keys=True))

csv_path, png_path = report_render(report, cfg.out_dir)
print(f"\nwrote {csv_path}")
print(f"wrote {png_path}")
print("per-arm dumps:", sorted(p.name for p in (cfg.out_dir / "full").iterdir()))

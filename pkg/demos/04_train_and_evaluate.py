"""
Training on a planted-signal world and scoring against a baseline
=================================================================

A small world with demographic and road-density signal, the full recipe
(Adam, weighted loss, plateau schedule, early stopping, best-checkpoint
return), and per-class F1 against the decomposition-linear baseline.
"""

import tempfile
from pathlib import Path

import numpy as np
import torch

from crashformer.baselines import DLinearClassifier
from crashformer.dataset import (SplitSpec, assemble_samples, attach_demographics,
                                 attach_tiles, class_weights, normalize_demographics,
                                 split, train_regions)
from crashformer.evaluation import f1_per_class, predict_labels, predict_probs
from crashformer.featurize import build_feature_table
from crashformer.geoindex import region_center, tile_coords
from crashformer.ingest import load_accidents, load_demographics, load_weather
from crashformer.model import CrashFormer, ModelConfig
from crashformer.synth import WorldConfig, generate_world, world_oracle
from crashformer.train import TrainConfig, batches_for, load_tile_bank, train_loop

root = Path(tempfile.mkdtemp(prefix="train_demo_"))
truth = generate_world(WorldConfig(n_regions=16, n_days=45, seed=5, base_rate=0.05,
                                   w_demo=2.5, w_img=2.5, w_weather=0.3), root)
print("bayes ceiling:", round(world_oracle(root)["bayes_f1_1"], 4))

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

mc = ModelConfig(seq_len=4, d_model=32, n_enc_layers=1, img_size=32,
                 img_channels=[8, 16, 32], demo_hidden=32, clf_hidden=64)
tc = TrainConfig(max_epochs=6, batch_size=256, seed=0, class_weights=samples.class_weights)
bank = load_tile_bank(samples, root / "tiles", mc.img_size)

torch.manual_seed(0)
model = CrashFormer(mc)
fwd = lambda m, b: m(b["seq"], b.get("tiles"), b.get("demo"))
history = train_loop(model, batches_for(samples, samples.split.train, bank),
                     batches_for(samples, samples.split.val, bank), tc, forward=fwd)
print(f"trained {len(history.epochs)} epochs; "
      f"best val loss {history.best_val_loss:.4f} at epoch {history.best_epoch}")
for rec in history.epochs:
    print(f"  epoch {rec.epoch}: train {rec.train_loss:.4f} val {rec.val_loss:.4f} "
          f"lr {rec.lr:.1e} ({rec.wall_seconds:.1f}s)")

test = batches_for(samples, samples.split.test, bank)
labels = samples.labels[samples.split.test].astype(np.int64)
metrics = f1_per_class(predict_labels(predict_probs(model, test, 256, fwd)), labels)
print(f"\nfull model      f1_1={metrics.f1_1:.4f} f1_0={metrics.f1_0:.4f}")

torch.manual_seed(0)
baseline = DLinearClassifier(seq_len=4)
seq_fwd = lambda m, b: m(b["seq"])
train_loop(baseline, batches_for(samples, samples.split.train),
           batches_for(samples, samples.split.val), tc, forward=seq_fwd)
base_metrics = f1_per_class(
    predict_labels(predict_probs(baseline, batches_for(samples, samples.split.test),
                                 256, seq_fwd)), labels)
print(f"dlinear baseline f1_1={base_metrics.f1_1:.4f} f1_0={base_metrics.f1_0:.4f}")
print(f"multimodal gain: {metrics.f1_1 - base_metrics.f1_1:+.4f} absolute f1_1")

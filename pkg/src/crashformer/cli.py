"""Command-line surface: one subcommand per pipeline stage.

All logging goes to stderr; machine-readable outputs are files only.
Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
The resolved config is echoed (sorted keys) into every output directory
for provenance.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (SplitSpec, assemble_samples, attach_demographics,
                      attach_tiles, class_weights, normalize_demographics, read_dataset,
                      split, stats_report, train_regions, write_dataset)
from .errors import RuntimeFailure, ValidationError
from .evaluation import (EXPERIMENT_KINDS, ExperimentConfig, dump_predictions,
                         f1_per_class, load_report, predict_labels, predict_probs,
                         report_render, run_experiment)
from .featurize import FeatureTable, build_feature_table, window_count
from .geoindex import region_center, tile_coords
from .ingest import fetch_tile, load_accidents, load_demographics, load_weather
from .model import CrashFormer, ModelConfig, load_checkpoint, save_checkpoint
from .synth import WorldConfig, generate_world, world_oracle
from .train import ClassWeights, TrainConfig, batches_for, load_tile_bank, train_loop

log = logging.getLogger("crashformer")

DEFAULT_CONFIG = {
    "paths": {
        "world_dir": "world",
        "cache_dir": None,          # default: <world_dir>/tiles; env CRASHFORMER_CACHE wins
        "dataset_dir": "dataset",
        "run_dir": "runs",
        "tile_source": "offline",   # or a URL template with {z}/{x}/{y}
    },
    "geoindex": {
        "zoom": 14,
    },
    "featurize": {
        "weather_radius_km": 30.0,
        "epoch": None,              # default: synth world epoch
        "n_days": None,             # default: synth world length
    },
    "dataset": {
        "k": 4,
        "split": {
            "kind": "random",
            "seed": 0,
            "ratios": [0.70, 0.10, 0.20],
            "cutoff": None,
            "region_fraction": None,
        },
        "class_weights": None,      # null -> inverse frequency; or [w0, w1]
    },
    "model": {
        "seq_len": 4,
        "d_model": 64,
        "n_enc_layers": 2,
        "n_modes": 2,
        "decomp_kernel": 3,
        "img_size": 64,
        "img_channels": [8, 16, 32],
        "demo_hidden": 64,
        "clf_hidden": 128,
        "dropout": 0.1,
        "use_img": True,
        "use_demo": True,
    },
    "train": {
        "max_epochs": 200,
        "early_stop_patience": 10,
        "lr_init": 1e-3,
        "lr_factor": 0.9,
        "lr_patience": 5,
        "lr_min": 1e-6,
        "batch_size": 256,
        "seed": 0,
        "grad_clip": 5.0,
    },
    "experiment": {
        "kind": "seq_sweep",
        "k_values": [4, 8, 12, 16],
    },
    "synth": {
        "n_regions": 20,
        "n_days": 30,
        "seed": 0,
        "base_rate": 0.05,
        "w_hist": 0.8,
        "w_weather": 0.8,
        "w_demo": 1.5,
        "w_img": 1.5,
        "start_day": "2021-01-04",
    },
}


def _merge(defaults, user, path="config"):
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ValidationError(f"{path}: expected an object")
        unknown = set(user) - set(defaults)
        if unknown:
            raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
        return {k: _merge(defaults[k], user[k], f"{path}.{k}") if k in user else defaults[k]
                for k in defaults}
    return user


def load_config(path: str | None, overrides: list[str], seed: int | None,
                out: str | None, offline: bool) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}")
        cfg = _merge(DEFAULT_CONFIG, user)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not section.key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.split(".")
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ValidationError(f"override targets unknown key {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ValidationError(f"override targets unknown key {dotted!r}")
        try:
            node[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[keys[-1]] = raw
    if seed is not None:
        cfg["train"]["seed"] = seed
        cfg["dataset"]["split"]["seed"] = seed
        cfg["synth"]["seed"] = seed
    if out is not None:
        cfg["paths"]["run_dir"] = out
    if offline:
        cfg["paths"]["tile_source"] = "offline"
    return cfg


def cache_dir_of(cfg: dict) -> Path:
    env = os.environ.get("CRASHFORMER_CACHE")
    if env:
        return Path(env)
    if cfg["paths"]["cache_dir"]:
        return Path(cfg["paths"]["cache_dir"])
    return Path(cfg["paths"]["world_dir"]) / "tiles"


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "config": cfg}
    (out_dir / "config.resolved.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def _world_meta(cfg: dict) -> tuple[datetime, int]:
    """Feature horizon: explicit featurize settings, else the synth section."""
    f = cfg["featurize"]
    if f["epoch"]:
        epoch = datetime.fromisoformat(f["epoch"])
    else:
        epoch = datetime.combine(date.fromisoformat(cfg["synth"]["start_day"]),
                                 datetime.min.time())
    n_days = f["n_days"] if f["n_days"] else cfg["synth"]["n_days"]
    return epoch, window_count(epoch, (epoch + timedelta(days=n_days - 1)).date())


def _build_table(cfg: dict) -> FeatureTable:
    world = Path(cfg["paths"]["world_dir"])
    acc = load_accidents(world / "accidents.csv")
    wea = load_weather(world / "weather.csv")
    epoch, n_windows = _world_meta(cfg)
    return build_feature_table(acc.records, wea.records, epoch, n_windows,
                               radius_km=cfg["featurize"]["weather_radius_km"])


def cmd_synth(cfg: dict) -> int:
    s = cfg["synth"]
    wc = WorldConfig(n_regions=s["n_regions"], n_days=s["n_days"], seed=s["seed"],
                     base_rate=s["base_rate"], w_hist=s["w_hist"], w_weather=s["w_weather"],
                     w_demo=s["w_demo"], w_img=s["w_img"],
                     start_day=date.fromisoformat(s["start_day"]))
    world_dir = Path(cfg["paths"]["world_dir"])
    generate_world(wc, world_dir)
    oracle = world_oracle(world_dir)
    (world_dir / "oracle.json").write_text(json.dumps(oracle, sort_keys=True, indent=1),
                                           encoding="utf-8")
    echo_config(cfg, world_dir)
    log.info("synthetic world written to %s (bayes f1_1 %.4f)", world_dir, oracle["bayes_f1_1"])
    return 0


def cmd_ingest(cfg: dict) -> int:
    world = Path(cfg["paths"]["world_dir"])
    out = Path(cfg["paths"]["run_dir"]) / "ingest"
    acc = load_accidents(world / "accidents.csv")
    wea = load_weather(world / "weather.csv")
    dem = load_demographics(world / "demographics.csv")
    report = {
        "accidents": {"accepted": acc.n_accepted, "rejected": acc.n_rejected},
        "weather": {"accepted": wea.n_accepted, "rejected": wea.n_rejected},
        "demographics": {"accepted": dem.n_accepted, "rejected": dem.n_rejected},
        "rejected_rows": {
            "accidents": acc.rejected, "weather": wea.rejected, "demographics": dem.rejected,
        },
    }
    echo_config(cfg, out)
    (out / "ingest.report.json").write_text(json.dumps(report, sort_keys=True, indent=1),
                                            encoding="utf-8")
    log.info("ingest ok: %d accidents, %d weather, %d demographics",
             acc.n_accepted, wea.n_accepted, dem.n_accepted)
    return 0


def cmd_featurize(cfg: dict) -> int:
    out = Path(cfg["paths"]["run_dir"]) / "features"
    table = _build_table(cfg)
    echo_config(cfg, out)
    np.savez(out / "table.npz",
             features=table.features, labels=table.labels,
             cells=np.array([r.cell for r in table.regions], dtype=np.uint64))
    meta = {"epoch": table.epoch.isoformat(), "n_windows": table.n_windows,
            "n_regions": len(table.regions)}
    (out / "table.meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1),
                                         encoding="utf-8")
    log.info("feature table: %d regions x %d windows", len(table.regions), table.n_windows)
    return 0


def cmd_build_dataset(cfg: dict) -> int:
    world = Path(cfg["paths"]["world_dir"])
    out = Path(cfg["paths"]["dataset_dir"])
    table = _build_table(cfg)
    samples = assemble_samples(table, cfg["dataset"]["k"])

    sp = cfg["dataset"]["split"]
    spec = SplitSpec(kind=sp["kind"], seed=sp["seed"], ratios=tuple(sp["ratios"]),
                     cutoff=datetime.fromisoformat(sp["cutoff"]) if sp["cutoff"] else None,
                     region_fraction=sp["region_fraction"])
    samples.split = split(samples, spec)

    override = cfg["dataset"]["class_weights"]
    samples.class_weights = class_weights(
        samples.labels[samples.split.train],
        override=tuple(override) if override else None)

    dem = load_demographics(world / "demographics.csv")
    normalized, stats = normalize_demographics(dem.records, train_regions(samples))
    samples.norm_stats = stats
    attach_demographics(samples, dem.records, normalized)

    cache = cache_dir_of(cfg)
    source = cfg["paths"]["tile_source"]
    zoom = cfg["geoindex"]["zoom"]
    tile_paths = {}
    for region in samples.unique_regions:
        fetch_tile(region, cache, source, zoom=zoom)
        tc = tile_coords(*region_center(region), zoom)
        tile_paths[region.cell] = f"{tc.zoom}/{tc.x}/{tc.y}.png"
    attach_tiles(samples, tile_paths)

    manifest = write_dataset(samples, out)
    echo_config(cfg, out)
    report = stats_report(samples)
    (out / "stats.json").write_text(json.dumps(report, sort_keys=True, indent=1),
                                    encoding="utf-8")
    log.info("dataset: %d samples, positive rate %.4f", manifest["n_samples"],
             report["positive_rate"])
    return 0


def _model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    m["seq_len"] = cfg["dataset"]["k"] if m.get("seq_len") is None else m["seq_len"]
    return ModelConfig(**m)


def _train_config(cfg: dict, weights: ClassWeights) -> TrainConfig:
    t = dict(cfg["train"])
    return TrainConfig(class_weights=weights, **t)


def cmd_train(cfg: dict) -> int:
    samples = read_dataset(cfg["paths"]["dataset_dir"])
    out = Path(cfg["paths"]["run_dir"]) / "train"
    mc = _model_config(cfg)
    if mc.seq_len != samples.k:
        raise ValidationError(f"model.seq_len {mc.seq_len} != container K {samples.k}")
    tc = _train_config(cfg, samples.class_weights)
    bank = load_tile_bank(samples, cache_dir_of(cfg), mc.img_size) if mc.use_img else None
    import torch
    torch.manual_seed(tc.seed)
    model = CrashFormer(mc)
    history = train_loop(model,
                         batches_for(samples, samples.split.train, bank),
                         batches_for(samples, samples.split.val, bank), tc)
    echo_config(cfg, out)
    save_checkpoint(model, out / "checkpoint.zip")
    history.save(out / "history.jsonl")
    log.info("trained %d epochs; best val loss %.6f at epoch %d",
             len(history.epochs), history.best_val_loss, history.best_epoch)
    return 0


def cmd_evaluate(cfg: dict) -> int:
    samples = read_dataset(cfg["paths"]["dataset_dir"])
    run_dir = Path(cfg["paths"]["run_dir"])
    out = run_dir / "eval"
    model = load_checkpoint(run_dir / "train" / "checkpoint.zip")
    bank = (load_tile_bank(samples, cache_dir_of(cfg), model.cfg.img_size)
            if model.cfg.use_img else None)
    test = batches_for(samples, samples.split.test, bank)
    probs = predict_probs(model, test, cfg["train"]["batch_size"],
                          lambda m, b: m(b["seq"], b.get("tiles"), b.get("demo")))
    labels = samples.labels[samples.split.test].astype(np.int64)
    metrics = f1_per_class(predict_labels(probs), labels)
    echo_config(cfg, out)
    dump_predictions(out, probs, labels.astype(np.uint8))
    (out / "metrics.json").write_text(json.dumps(asdict(metrics), sort_keys=True, indent=1),
                                      encoding="utf-8")
    log.info("test f1_1=%.4f f1_0=%.4f", metrics.f1_1, metrics.f1_0)
    return 0


def cmd_experiment(cfg: dict, kind: str | None) -> int:
    kind = kind or cfg["experiment"]["kind"]
    samples = read_dataset(cfg["paths"]["dataset_dir"])
    out = Path(cfg["paths"]["run_dir"]) / f"experiment-{kind}"
    ec = ExperimentConfig(out_dir=out, cache_dir=cache_dir_of(cfg),
                          model=_model_config(cfg),
                          train=_train_config(cfg, samples.class_weights),
                          k_values=tuple(cfg["experiment"]["k_values"]))
    report = run_experiment(kind, samples, ec)
    echo_config(cfg, out)
    report_render(report, out)
    log.info("experiment %s: %d arms", kind, len(report.arms))
    return 0


def cmd_report(cfg: dict, report_path: str | None) -> int:
    path = Path(report_path) if report_path else (
        Path(cfg["paths"]["run_dir"]) / f"experiment-{cfg['experiment']['kind']}" / "report.json")
    report = load_report(path)
    out = path.parent
    report_render(report, out)
    log.info("re-rendered %s", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crashformer",
        description="Accident-risk pipeline: synthetic worlds, features, training, experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_kind in [("synth", False), ("ingest", False), ("featurize", False),
                             ("build-dataset", False), ("train", False), ("evaluate", False),
                             ("experiment", True), ("report", False)]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument("--out", default=None, help="override paths.run_dir")
        p.add_argument("--offline", action="store_true", help="never download tiles")
        if needs_kind:
            p.add_argument("--kind", choices=EXPERIMENT_KINDS, default=None)
        if name == "report":
            p.add_argument("--report-json", default=None, help="path to a report.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out, args.offline)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "featurize":
            return cmd_featurize(cfg)
        if args.command == "build-dataset":
            return cmd_build_dataset(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "experiment":
            return cmd_experiment(cfg, args.kind)
        if args.command == "report":
            return cmd_report(cfg, args.report_json)
        parser.error(f"unknown command {args.command}")
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except RuntimeFailure as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # unexpected
        log.exception("unexpected failure: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

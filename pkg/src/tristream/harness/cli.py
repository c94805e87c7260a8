"""Command-line experiment runner.

Subcommands: gen-data, train, eval, perturb, sweep, report, resilience.
Outputs go to ``--out``, else ``$TRISTREAM_OUTPUT_DIR``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from ..autodiff import UsageError
from ..metrics import write_report_csv
from ..perturb import ConfigError as PerturbConfigError
from ..perturb import perturb_dataset, write_replay_log
from ..synthdata import FormatError, generate_dataset, iter_clips, load_manifest, save_manifest, write_clip
from .config import OUTPUT_ENV, ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config
from .experiments import clean_and_perturbed, run_resilience, run_sweep, write_sweep_csv
from .report import bar_chart, line_chart, summarize, write_summary_csv
from .train import (
    RunRecord,
    TrainingError,
    as_image_clips,
    evaluate_clips,
    load_checkpoint,
    load_splits,
    pretrain_streams,
    save_checkpoint,
    train_model,
)

log = logging.getLogger("tristream")


def _out_dir(args, default: str = "runs") -> Path:
    p = Path(args.out or os.environ.get(OUTPUT_ENV) or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _parse_value(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot (1e-3) as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(raw)
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    return cfg.replace(**overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    d = cfg.data
    out = _out_dir(args, "data")
    manifest = generate_dataset(cfg.classes(), d.clips_per_class, tuple(d.splits), cfg.seeds.data, d.frames,
                                (d.height, d.width), out_dir=out, jitter=d.jitter)
    print(f"wrote {len(manifest.clips)} clips to {out} (manifest checksum {manifest.checksum()[:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    load_manifest(args.data)  # fail early on a missing or bad dataset
    out = _out_dir(args)
    splits = load_splits(cfg, args.data)
    model, record = train_model(cfg, splits, pretrain_streams(cfg, splits["train"]), dataset=str(args.data))
    record.metrics = clean_and_perturbed(cfg, model, splits["test"], cfg.mode)
    save_checkpoint(out / "checkpoint.npz", model, cfg)
    record.save(out / "run_record.json")
    dump_config(cfg, out / "config.yaml")
    rows = [dict(r, config_hash=record.config_hash)
            for cond, vals in record.metrics.items()
            for r in [dict(metric=m, model=cfg.mode, dataset="test", condition=cond, value=v) for m, v in vals.items()]]
    write_report_csv(out / "metrics.csv", rows, ("config_hash",))
    print(f"{cfg.mode}: best epoch {record.best_epoch}, test metrics {record.metrics}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    if args.condition == "perturbed" and not args.table:
        raise ConfigError("--table is required for the perturbed condition")
    out = _out_dir(args)
    clips = list(iter_clips(load_manifest(args.data), args.split))
    if args.as_images:
        clips = as_image_clips(clips, cfg.sampler.sample_count * cfg.sampler.stride)
    table = cfg.replace(**{"perturbation.table": args.table}).table() if args.condition == "perturbed" else None
    seed = cfg.seeds.perturb if args.seed is None else args.seed
    report, records = evaluate_clips(model, clips, cfg.mode, cfg.metrics.k, table, seed, cfg.magnitudes())
    dataset = ("images:" if args.as_images else "") + args.split
    rows = [dict(r, config_hash=cfg.config_hash()) for r in report.rows(cfg.mode, dataset, args.condition)]
    name = args.name or f"eval_{cfg.mode}_{args.condition}.csv"
    write_report_csv(out / name, rows, ("config_hash",))
    if records:
        write_replay_log(out / f"replay_{args.condition}.csv", records)
    for r in rows:
        print(f"{r['metric']},{r['model']},{r['dataset']},{r['condition']},{r['value']:.6f}")
    return 0


def cmd_perturb(args) -> int:
    manifest = load_manifest(args.data)
    cfg = _config(args)
    table = cfg.replace(**{"perturbation.table": args.table}).table()
    out = _out_dir(args, "perturbed")
    clips, records = perturb_dataset(list(iter_clips(manifest)), table, args.seed, cfg.magnitudes())
    for entry, clip in zip(manifest.clips, clips):
        entry.path = f"clips/{entry.clip_id}.tslb"
        write_clip(out / entry.path, clip)
    manifest.root = str(out)
    save_manifest(manifest, out / "manifest.json")
    write_replay_log(out / "replay.csv", records)
    print(f"perturbed {len(clips)} clips with table {args.table!r}, seed {args.seed}; wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rates = [int(r) for r in args.rates.split(",") if r.strip()]
    if not rates or any(r < 1 for r in rates):
        raise ConfigError(f"rates must be positive integers, got {args.rates!r}")
    out = _out_dir(args)
    points = run_sweep(cfg, rates, args.data)
    write_sweep_csv(out / "sweep.csv", points)
    if not args.no_plot:
        line_chart(out / "sweep.svg", [p.rate for p in points], [p.map_drop for p in points],
                   "sampled frames per clip", "mAP drop")
    for p in points:
        print(f"rate {p.rate} (stride {p.stride}): mAP drop {p.map_drop:.4f}")
    return 0


def cmd_report(args) -> int:
    paths = []
    for p in args.records:
        p = Path(p)
        paths.extend(sorted(p.glob("**/*record*.json")) if p.is_dir() else [p])
    if not paths:
        raise UsageError("report needs at least one run record")
    rows = summarize([RunRecord.load(p) for p in paths])
    out = _out_dir(args)
    write_summary_csv(out / "summary.csv", rows)
    bar_chart(out / "summary.svg", rows, args.metric)
    print(f"summarised {len(rows)} record(s) into {out / 'summary.csv'}")
    return 0


def cmd_resilience(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _out_dir(args)
    result = run_resilience(cfg, seeds, data_dir=args.data, out_dir=out)
    write_report_csv(out / "resilience.csv", result.rows(), ("seed", "config_hash"))
    for line in result.summary_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tristream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data: bool = False, config: bool = True):
        if config:
            p.add_argument("--config", help="YAML experiment config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config field, e.g. --set training.epochs=3")
        if data:
            p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic clip dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain streams, train a mode end to end, write checkpoint and record")
    common(p, data=True)
    p.add_argument("--mode", choices=("spatial_only", "two_stream", "three_stream"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on clean or perturbed data")
    common(p, data=True, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", choices=("clean", "perturbed"), default="clean")
    p.add_argument("--table", help="perturbation table: image, video, identity")
    p.add_argument("--seed", type=int, help="perturbation seed (default: the checkpoint's)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--as-images", action="store_true", help="evaluate median frames as still images")
    p.add_argument("--name", help="CSV file name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="write a perturbed copy of a dataset plus its replay log")
    common(p, data=True)
    p.add_argument("--table", default="video")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("sweep", help="retrain at several temporal sampling rates; CSV of mAP drop per rate")
    common(p)
    p.add_argument("--data", help="dataset directory (default: generate from the config)")
    p.add_argument("--rates", default="3,10,30")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summary CSV and SVG bar chart from run records")
    p.add_argument("records", nargs="*", help="run record JSON files or directories")
    p.add_argument("--metric", default="map_at_k", choices=("accuracy", "gap", "map_at_k"))
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("resilience", help="spatial-only vs two-stream drop comparison over seeds")
    common(p)
    p.add_argument("--data", help="dataset directory (default: generate per seed)")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_resilience)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, PerturbConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError) as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except TrainingError as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

    dtlpnet generate-data --config data.toml --out data/ --seed 7
    dtlpnet train --config train.toml
    dtlpnet eval --checkpoint runs/x/inference.pt --split test
    dtlpnet ablate --config train.toml --grid mic,kd
    dtlpnet report --runs runs/a runs/b

Exit codes: 0 success, 1 usage, 2 config, 3 runtime. ``DTLP_OUTPUT_ROOT``
prefixes relative output paths.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, load_train_config, schema_help
from .data import DataConfig, DataConfigError, DatasetManifest, generate_dataset, load_data_config

log = logging.getLogger("dtlpnet")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

ABLATION_FLAGS = {"mix": "use_mix", "mic": "use_mic", "kd": "use_kd", "rec": "use_rec", "corr": "use_corr"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _out(path):
    p = Path(path)
    root = os.environ.get("DTLP_OUTPUT_ROOT")
    return Path(root) / p if root and not p.is_absolute() else p


def _data_schema():
    from dataclasses import fields

    from .data import DATA_KEYS_HELP

    return "\n".join(f"  {f.name} = {getattr(DataConfig(), f.name)!r}\n      {DATA_KEYS_HELP[f.name]}"
                     for f in fields(DataConfig))


def build_parser():
    p = _Parser(prog="dtlpnet", description="DTLP-Net semi-supervised 3D segmentation at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    fmt = argparse.RawDescriptionHelpFormatter

    g = sub.add_parser("generate-data", help="write a synthetic multi-domain dataset", formatter_class=fmt,
                       epilog="data config keys ([data] table or flat):\n" + _data_schema())
    g.add_argument("--config", help="TOML/JSON data config; defaults are used when omitted")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="seed for shapes, textures and splits")

    t = sub.add_parser("train", help="train one model", formatter_class=fmt,
                       epilog="train config keys ([train] table or flat):\n" + schema_help())
    t.add_argument("--config", required=True, help="TOML/JSON train config")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--data", help="overrides data_dir")
    t.add_argument("--out", help="overrides output_dir")
    t.add_argument("--resume", help="training checkpoint to resume from")

    e = sub.add_parser("eval", help="score an inference export or checkpoint")
    e.add_argument("--checkpoint", required=True, nargs="+", help="one export per repeat")
    e.add_argument("--split", default="test", help="manifest split to score (its labeled ids)")
    e.add_argument("--data", help="dataset directory; defaults to the checkpoint's data_dir")
    e.add_argument("--out", help="directory for metrics.csv and summary.csv")

    a = sub.add_parser("ablate", help="train+eval over on/off subsets of loss terms", formatter_class=fmt,
                       epilog="toggles: " + ", ".join(ABLATION_FLAGS))
    a.add_argument("--config", required=True, help="base TOML/JSON train config")
    a.add_argument("--grid", required=True, help="comma-separated toggles, e.g. mic,kd -> 4 runs")
    a.add_argument("--out", help="root directory of the ablation runs")
    a.add_argument("--split", default="test", help="split scored after each run")
    a.add_argument("--seed", type=int, help="overrides the config seed")

    r = sub.add_parser("report", help="aggregate run directories into one table and plots")
    r.add_argument("--runs", required=True, nargs="+", help="run directories holding losses.csv and/or summary.csv")
    r.add_argument("--out", default="report", help="directory for report.csv and plots")
    return p


def cmd_generate(args):
    cfg = load_data_config(args.config) if args.config else DataConfig()
    out = _out(args.out)
    manifest = generate_dataset(cfg, args.seed, out)
    print(f"wrote {len(manifest.samples)} samples to {out}")


def _train(cfg: TrainConfig, resume=None):
    from .training import run_training

    cfg = cfg.replace(output_dir=str(_out(cfg.output_dir)))
    manifest = DatasetManifest.load(cfg.data_dir)
    res = run_training(cfg, manifest, resume=resume,
                       progress=lambda row: log.info("it %d total %.4f", row["iteration"], row["total"]))
    return res, manifest


def cmd_train(args):
    cfg = load_train_config(args.config, seed=args.seed, data_dir=args.data, output_dir=args.out)
    res, _ = _train(cfg, args.resume)
    print(f"trained {res.state.iteration} iterations; export {res.export_path}")


def _eval(manifest, split, exports, out):
    from .evaluation import evaluate_split

    report = evaluate_split(manifest, split, exports)
    report.write(out)
    return report


def cmd_eval(args):
    import torch

    data = args.data
    if data is None:
        ck = torch.load(args.checkpoint[0], map_location="cpu", weights_only=False)
        cfg = ck.get("config")
        if cfg is None:
            raise UsageError("inference exports do not record a dataset; pass --data")
        data = cfg["data_dir"]
    manifest = DatasetManifest.load(data)
    out = _out(args.out or Path(args.checkpoint[0]).parent / f"eval_{args.split}")
    report = _eval(manifest, args.split, args.checkpoint, out)
    print(f"mean foreground Dice {report.mean_dice():.4f}; wrote {out}")


def ablation_grid(toggles):
    """Every on/off assignment of the toggles, all-on first."""
    for values in itertools.product([True, False], repeat=len(toggles)):
        yield dict(zip(toggles, values))


def cmd_ablate(args):
    toggles = [t.strip() for t in args.grid.split(",") if t.strip()]
    unknown = [t for t in toggles if t not in ABLATION_FLAGS]
    if unknown or not toggles:
        raise UsageError(f"unknown ablation toggles {unknown}; choose from {', '.join(ABLATION_FLAGS)}")
    base = load_train_config(args.config, seed=args.seed)
    root = _out(args.out or Path(base.output_dir) / "ablate")
    rows = []
    for assignment in ablation_grid(toggles):
        name = "_".join(f"{k}{int(v)}" for k, v in assignment.items())
        cfg = base.replace(output_dir=str(root / name), **{ABLATION_FLAGS[k]: v for k, v in assignment.items()})
        res, manifest = _train(cfg)
        report = _eval(manifest, args.split, [res.export_path], root / name)
        last = res.state.log[-1]
        rows.append({"run": name, **{k: int(v) for k, v in assignment.items()},
                     "mean_dice": report.mean_dice(), "final_total_loss": last["total"]})
        log.info("ablation %s: Dice %.4f", name, report.mean_dice())
    with open(root / "ablation_summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} runs; summary at {root / 'ablation_summary.csv'}")


def cmd_report(args):
    from .evaluation import plot_class_dice, plot_losses

    missing = [r for r in args.runs if not Path(r).exists()]
    if missing:
        raise FileNotFoundError(f"run directory not found: {', '.join(missing)}")
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, losses, summaries = [], {}, {}
    for run in args.runs:
        run = Path(run)
        summary = next(iter(sorted(run.rglob("summary.csv"))), None)
        if (run / "losses.csv").exists():
            losses[run.name] = run / "losses.csv"
        if summary is None:
            log.warning("no summary.csv under %s", run)
            continue
        with open(summary) as f:
            rows = list(csv.DictReader(f))
        summaries[run.name] = rows
        for r in rows:
            if r["class"] == "mean":
                table.append({"run": run.name, "metric": r["metric"], "mean": r["mean"], "std": r["std"]})
    if not table and not losses:
        raise FileNotFoundError("none of the runs contain summary.csv or losses.csv")
    if table:
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
        plot_class_dice(summaries, out / "class_dice.png")
    if losses:
        plot_losses(losses, out / "losses.png")
    print(f"report written to {out}")


COMMANDS = {"generate-data": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())

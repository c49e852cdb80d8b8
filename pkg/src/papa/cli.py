"""Command-line entry point.

    papa train --config run.cfg [--seed N] [--out DIR] [--workers W]
    papa evaluate --checkpoint FILE --dataset {optdigits,synthetic,cifar10,PATH}
    papa soup --run DIR --kind {avg,greedy}
    papa ensemble --run DIR
    papa analyze --run DIR [--similarity] [--events]

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import hidden_layers, mean_pairwise_similarity, cosine_feature_similarity
from .config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from .data import DataFormatError, load_optdigits
from .harness import (
    CheckpointError,
    emit_metrics,
    is_conv,
    load_checkpoint,
    load_splits,
    model_spec,
    run_training,
    save_checkpoint,
    _load,
)
from .repair import RepairPlan
from .soups import BNRebuild, average_soup, evaluate_accuracy, greedy_soup

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="papa", description="Population parameter averaging experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a population from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("evaluate", help="accuracy of a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="optdigits, synthetic, cifar10, or a path to an optdigits-format file")
    p.add_argument("--config", help="config describing the architecture (default: config.cfg next to the checkpoint)")
    p.add_argument("--data-path", default="")

    p = sub.add_parser("soup", help="build a soup from a training run")
    p.add_argument("--run", required=True)
    p.add_argument("--kind", choices=("avg", "greedy"), required=True)

    p = sub.add_parser("ensemble", help="logit-average ensemble accuracy of a run")
    p.add_argument("--run", required=True)

    p = sub.add_parser("analyze", help="feature similarity and averaging-event summaries")
    p.add_argument("--run", required=True)
    p.add_argument("--similarity", action="store_true")
    p.add_argument("--events", action="store_true")
    p.add_argument("--samples", type=int, default=256)
    return parser


def _write_run(result, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "members").mkdir(exist_ok=True)
    (out / "config.cfg").write_text(dump_config(result.config))
    emit_metrics(result.metrics, out / "metrics.csv")
    for j, net in enumerate(result.population.members):
        save_checkpoint(net, out / "members" / f"member_{j:02d}.ckpt")
    save_checkpoint(result.average_soup, out / "soup_avg.ckpt")
    save_checkpoint(result.greedy_soup.network, out / "soup_greedy.ckpt")
    with open(out / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "pre_mean", "pre_min", "pre_max", "post", "post_repair"])
        for e in result.trace.events:
            rep = "" if e.post_repair_accuracy is None else repr(e.post_repair_accuracy)
            w.writerow([repr(e.epoch), repr(e.pre_mean), repr(min(e.pre_accuracies)), repr(max(e.pre_accuracies)), repr(e.post_accuracy), rep])
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2) + "\n")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    overrides = []
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if args.out:
        overrides.append(("out", args.out))
    if args.workers is not None:
        overrides.append(("workers", str(args.workers)))
    cfg = apply_overrides(cfg, overrides)
    result = run_training(cfg)
    _write_run(result, Path(cfg.out))
    s = result.summary
    print(f"variant {s['variant']}  mean {s['mean_accuracy']:.4f}  avg-soup {s['avg_soup_accuracy']:.4f}  "
          f"greedy-soup {s['greedy_soup_accuracy']:.4f}  ensemble {s['ensemble_accuracy']:.4f}")
    print(f"wrote {cfg.out}")
    return EXIT_OK


def _run_config(run: Path) -> ExperimentConfig:
    return load_config(run / "config.cfg")


def _run_members(run: Path, cfg: ExperimentConfig, splits):
    spec = model_spec(cfg.model, splits.train.inputs.shape[1:], splits.train.n_classes, cfg.batchnorm)
    paths = sorted((run / "members").glob("member_*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no member checkpoints in {run / 'members'}")
    return [load_checkpoint(p, spec) for p in paths]


def _cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.cfg"
    cfg = load_config(cfg_path) if cfg_path.is_file() else None
    if args.config and cfg is None:
        raise ConfigError(f"config file not found: {args.config}")

    if args.dataset in ("optdigits", "synthetic", "cifar10"):
        base = cfg or ExperimentConfig()
        base = apply_overrides(base, [("dataset", args.dataset)] + ([("data_path", args.data_path)] if args.data_path else []))
        ds = _load(base, base.data_path)
        if is_conv(base.model):
            ds = ds.as_images()
    else:
        if not Path(args.dataset).is_file():
            raise ConfigError(f"unknown dataset {args.dataset!r}")
        ds = load_optdigits(args.dataset)

    spec = None
    if cfg is not None:
        spec = model_spec(cfg.model, ds.inputs.shape[1:], ds.n_classes, cfg.batchnorm)
    net = load_checkpoint(ckpt, spec)
    print(f"accuracy {evaluate_accuracy(net, ds)}")
    return EXIT_OK


def _cmd_soup(args) -> int:
    run = Path(args.run)
    cfg = _run_config(run)
    splits = load_splits(cfg)
    members = _run_members(run, cfg, splits)
    if args.kind == "avg":
        plan = None
        if cfg.soup.repair:
            plan = RepairPlan(np.full(len(members), 1.0 / len(members)), splits.train, k=cfg.soup.k)
        soup = average_soup(members, repair_plan=plan)
        if plan is None:
            BNRebuild(splits.train, k=cfg.soup.k).apply(soup)
        included = list(range(len(members)))
    else:
        eval_ds = splits.holdout if (cfg.soup.greedy_eval == "holdout" and splits.holdout.n) else splits.train
        res = greedy_soup(members, eval_ds, BNRebuild(splits.train, k=cfg.soup.k), cfg.soup.greedy_rebuild)
        soup, included = res.network, res.included_member_ids
    out = run / f"soup_{args.kind}.ckpt"
    save_checkpoint(soup, out)
    print(f"{args.kind}-soup members {included} test accuracy {evaluate_accuracy(soup, splits.test)}")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_ensemble(args) -> int:
    run = Path(args.run)
    cfg = _run_config(run)
    splits = load_splits(cfg)
    members = _run_members(run, cfg, splits)
    print(f"ensemble of {len(members)} test accuracy {evaluate_accuracy(members, splits.test)}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    run = Path(args.run)
    if not (args.similarity or args.events):
        raise UsageError("analyze needs --similarity and/or --events")
    if args.similarity:
        cfg = _run_config(run)
        splits = load_splits(cfg)
        members = _run_members(run, cfg, splits)
        n = min(args.samples, splits.test.n)
        layers = hidden_layers(members[0])
        pair = mean_pairwise_similarity(members, layers, splits.test, n) if len(members) > 1 else {}
        rows = []
        soup_path = run / "soup_avg.ckpt"
        soup = load_checkpoint(soup_path, model_spec(cfg.model, splits.train.inputs.shape[1:], splits.train.n_classes, cfg.batchnorm)) if soup_path.exists() else None
        for layer in layers:
            vs_soup = ""
            if soup is not None:
                vs_soup = repr(float(np.mean([cosine_feature_similarity(m, soup, layer, splits.test, n) for m in members])))
            rows.append([layer, repr(pair.get(layer, float("nan"))), vs_soup])
            print(f"{layer:>10}  member-pairs {pair.get(layer, float('nan')):.4f}  member-vs-avg {vs_soup[:6] or '-'}")
        with open(run / "similarity.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "member_pairs_unaligned", "member_vs_avg_soup"])
            w.writerows(rows)
    if args.events:
        path = run / "events.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        boosted = 0
        for r in rows:
            final = float(r["post_repair"] or r["post"])
            boosted += final >= float(r["pre_mean"])
            print(f"epoch {float(r['epoch']):6.2f}  pre-mean {float(r['pre_mean']):.4f}  post {float(r['post']):.4f}  "
                  f"post-repair {r['post_repair'][:6] or '-'}")
        print(f"{boosted}/{len(rows)} events with post-averaging accuracy >= pre-averaging mean")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "soup": _cmd_soup,
    "ensemble": _cmd_ensemble,
    "analyze": _cmd_analyze,
}


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"papa: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"papa: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DataFormatError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"papa: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())

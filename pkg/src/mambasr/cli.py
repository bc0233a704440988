"""Command-line entry point: ``mambasr {gen,train,eval,stats,bench}``."""
from __future__ import annotations

import argparse
import csv
import os
import sys

from . import bench as benchmod
from ._alloc import tune_allocator
from . import config as configmod
from .data import DegradationSpec, PhantomKind, load_dataset, make_dataset, save_dataset
from .errors import ConfigError, UsageError
from .metrics import METRICS, MetricReport, format_value
from .stats import SampleGroup, compare, jarque_bera, shapiro_flag
from .train import Trainer, evaluate, load_model, loss_config, write_curve

CHECKPOINT_NAME = "checkpoint.msrckpt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", help="root seed (unsigned 64-bit)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mambasr", description="Selective-scan super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("gen", help="write a phantom dataset"))
    p = sub.add_parser("train", help="train on a dataset")
    _common(p)
    p.add_argument("--data", help="dataset directory (overrides data.dir)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p = sub.add_parser("eval", help="score a checkpoint and bicubic on the test split")
    _common(p)
    p.add_argument("--data", help="dataset directory (overrides data.dir)")
    p.add_argument("--checkpoint", help="checkpoint file (overrides eval.checkpoint)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("stats", help="omnibus and pairwise tests on metric CSVs")
    _common(p)
    p.add_argument("csv", nargs="+", help="per-image metric CSV files")
    _common(sub.add_parser("bench", help="time the sequence mixers"))
    return parser


def _run_config(args) -> configmod.RunConfig:
    cfg = configmod.load(args.config, args.set)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def _data_dir(args, cfg) -> str:
    path = getattr(args, "data", None) or cfg["data.dir"]
    if not path:
        raise ConfigError("no dataset directory: pass --data or set data.dir")
    return path


def _degradation(cfg) -> DegradationSpec:
    return DegradationSpec(cfg["data.factor_h"], cfg["data.factor_w"])


def cmd_gen(args, cfg) -> None:
    spec = _degradation(cfg)
    train, test = make_dataset(cfg["data.n_train"], cfg["data.n_test"], spec, cfg["seed"],
                               size=cfg["data.size"], kind=PhantomKind(cfg["data.kind"]))
    path = save_dataset(args.out, train, test, spec)
    print(path)


def cmd_train(args, cfg) -> None:
    train, _ = load_dataset(_data_dir(args, cfg))
    trainer = Trainer(cfg, train)
    if args.resume:
        trainer.restore(args.resume)
    trainer.fit(log_every=cfg["train.log_every"])
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, CHECKPOINT_NAME)
    trainer.save(ckpt)
    write_curve(os.path.join(args.out, "loss_curve.csv"), trainer.curve)
    print(ckpt)


def cmd_eval(args, cfg) -> None:
    ckpt = args.checkpoint or cfg["eval.checkpoint"]
    if not ckpt:
        raise ConfigError("no checkpoint: pass --checkpoint or set eval.checkpoint")
    mcfg, params = load_model(ckpt)
    train, test = load_dataset(_data_dir(args, cfg))
    pairs = test if args.split == "test" else train
    report = evaluate(mcfg, params, pairs, loss_config(cfg).perceptual)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "metrics.csv"))
    report.write_summary_csv(os.path.join(args.out, "metrics_summary.csv"))
    print(os.path.join(args.out, "metrics.csv"))


def _write(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_value(v) for v in r])


def cmd_stats(args, cfg) -> None:
    report = MetricReport()
    for path in args.csv:
        if not os.path.exists(path):
            raise FileNotFoundError(f"metric file not found: {path}")
        report.rows.extend(MetricReport.read_csv(path).rows)
    methods = report.methods()
    if len(methods) < 2:
        raise UsageError(f"stats needs at least two methods, found {methods}")
    comparison, omnibus, normality = [], [], []
    for metric in METRICS:
        groups = [SampleGroup(m, report.values(m, metric)) for m in methods]
        res = compare(groups)
        omnibus.append([metric, res.statistic, res.df, res.p_value, res.tied])
        for pr in res.pairwise:
            comparison.append([metric, pr.method_a, pr.method_b, pr.z, pr.p_raw, pr.p_adjusted,
                               pr.p_adjusted < 0.05])
        for g in groups:
            if g.values.size >= 8:
                normality.append([metric, g.method, g.values.size, jarque_bera(g.values), shapiro_flag(g.values)])
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "comparison.csv"),
           ["metric", "method_a", "method_b", "z", "p_raw", "p_holm", "significant"], comparison)
    _write(os.path.join(args.out, "omnibus.csv"), ["metric", "H", "df", "p_value", "tied"], omnibus)
    _write(os.path.join(args.out, "normality.csv"), ["metric", "method", "n", "jb", "rejected"], normality)
    print(os.path.join(args.out, "comparison.csv"))


def cmd_bench(args, cfg) -> None:
    results = benchmod.run(cfg["bench.lengths"], cfg["bench.reps"], cfg["bench.channels"],
                           cfg["bench.state_dim"], cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "timing.csv")
    benchmod.write_csv(path, results)
    for mixer, ratios in benchmod.doubling_ratios(results).items():
        print(mixer, " ".join(f"{L}:{r:.2f}" for L, r in ratios.items()))
    print(path)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "stats": cmd_stats, "bench": cmd_bench}


def main(argv=None) -> int:
    tune_allocator()
    try:
        args = build_parser().parse_args(argv)
        cfg = _run_config(args)
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ") or exc.__class__.__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``python3 -m dancelab <verb> ...``.

Verbs
  run      train and evaluate one (method, regime) cell over its seeds
  matrix   every regime x method pair with one shared hyperparameter set
  sweep    sensitivity sweep over lambda, m, rho or tau_nc
  project  2-D PCA projection of target features to CSV
  probe    one-shot linear probe of learned target features

Every verb takes ``--config FILE`` (flat key=value text or JSON) and any
number of ``--set key=value`` overrides using the same keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evalkit import write_table
from .experiments import (ConfigError, ExperimentConfig, apply_setting,
                          emit_projection, load_config, rho_sweep, run_experiment, run_matrix,
                          run_seed, run_sensitivity)
from .model import load_checkpoint
from .synthdata import load_csv
from .trainer import export_features

log = logging.getLogger("dancelab")


def _csv_list(text, conv=str):
    return [conv(v) for v in text.split(",") if v.strip()]


def _value(text):
    return text if text == "auto" else float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dancelab", description="Universal domain adaptation lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value or JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
        sp.add_argument("--regime")
        sp.add_argument("--method")
        sp.add_argument("--seeds", help="comma-separated seeds")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="one method on one regime")
    common(sp)

    sp = sub.add_parser("matrix", help="regimes x methods grid")
    common(sp)
    sp.add_argument("--regimes", default="CDA,PDA,ODA,OPDA")
    sp.add_argument("--methods", default="SO,DANCE")

    sp = sub.add_parser("sweep", help="sensitivity sweep")
    common(sp)
    sp.add_argument("--param", required=True, choices=["lambda", "m", "rho", "tau_nc"])
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--fixed-rho", action="store_true",
                    help="for --param rho: re-threshold one trained model instead of retraining")

    sp = sub.add_parser("project", help="PCA projection of target features")
    common(sp)
    sp.add_argument("--checkpoint", help="use a saved model instead of training")
    sp.add_argument("--data", help="target CSV (f0..fD,label), required with --checkpoint")
    sp.add_argument("--domain", default="target", choices=["source", "target"])
    sp.add_argument("--known", help="comma-separated known labels (default: all)")
    sp.add_argument("--output", required=True, help="projection CSV path")

    sp = sub.add_parser("probe", help="one-shot linear probe")
    common(sp)
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        apply_setting(cfg, *item.split("=", 1))
    if args.regime:
        apply_setting(cfg, "regime", args.regime)
    if args.method:
        apply_setting(cfg, "method", args.method)
    if args.seeds:
        apply_setting(cfg, "seeds", args.seeds)
    if args.out:
        cfg.output_dir = args.out
    return cfg.validate()


def _print_rows(rows, columns=("kind", "method", "regime", "seed", "overall_acc", "os",
                               "os_star", "auc_unknown", "n_rejected")):
    print(",".join(columns))
    for r in rows:
        d = r if isinstance(r, dict) else r.to_csv_dict()
        print(",".join(_fmt(d.get(c)) for c in columns))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    out = run_experiment(cfg)
    _print_rows(out.all_rows)
    return 0


def cmd_matrix(args) -> int:
    cfg = config_from_args(args)
    res = run_matrix(cfg, _csv_list(args.regimes, str.upper), _csv_list(args.methods, str.upper),
                     output_dir=cfg.output_dir)
    _print_rows(res.summaries)
    failed = [s for s in res.summaries if s.error]
    for s in failed:
        print(f"cell {s.method}/{s.regime} failed: {s.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    if args.fixed_rho:
        if args.param != "rho":
            raise ConfigError("--fixed-rho: only valid with --param rho")
        run = run_seed(cfg, cfg.seeds[0])
        tgt = run.target
        table = rho_sweep(run.state.model, tgt.X, tgt.y, run.scenario,
                          _csv_list(args.values, float), run.eval_domain)
        columns = ("rho", "n_rejected", "overall_acc", "os", "os_star")
        name = "rho_fixed.csv"
    else:
        table = run_sensitivity(args.param, _csv_list(args.values, _value), cfg)
        columns = ("param", "value", "method", "regime", "headline", "auc_unknown", "n_rejected", "error")
        name = f"sweep_{args.param}.csv"
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        write_table(table, Path(cfg.output_dir) / name)
    _print_rows(table, columns)
    return 0


def cmd_project(args) -> int:
    known = _csv_list(args.known, int) if args.known else None
    if args.checkpoint:
        if not args.data:
            raise ConfigError("--data: required together with --checkpoint")
        model = load_checkpoint(args.checkpoint)
        data = load_csv(args.data, args.domain)
        feats, labels = export_features(model, data.X, args.domain), data.y
    else:
        cfg = config_from_args(args)
        run = run_seed(cfg, cfg.seeds[0])
        feats = export_features(run.state.model, run.target.X, run.eval_domain)
        labels = run.target.y
        if known is None:
            known = list(run.scenario.shared)
    path, explained = emit_projection(feats, labels, args.output, known)
    print(f"wrote {len(labels)} rows to {path} (top-2 variance share {explained:.4f})")
    return 0


def cmd_probe(args) -> int:
    cfg = config_from_args(args)
    cfg.probe = True
    out = run_experiment(cfg)
    _print_rows(out.all_rows, ("kind", "method", "regime", "seed", "probe_known", "probe_novel"))
    return 0


COMMANDS = {"run": cmd_run, "matrix": cmd_matrix, "sweep": cmd_sweep,
            "project": cmd_project, "probe": cmd_probe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"dancelab {args.verb}: error: {exc}", file=sys.stderr)
        return 2

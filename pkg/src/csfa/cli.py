"""Command line entry point: ``csfa train-base | run | ablate | grid | scenario dump``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .errors import ArgumentError, CSFAError
from .streams import Scenario, ScenarioSpec, dump_scenario, load_spec
from .storage import load_model, save_model
from .training import TrainResult

EXIT_CODES = {"argument": 2, "config": 3, "dimension": 4, "state": 5, "run": 6}

# (flag, dest, type, target dataclass field); None defaults leave the config untouched
_SCENARIO_FLAGS = [("--base-classes", int, "base_classes"), ("--sessions", int, "sessions"),
                   ("--way", int, "way"), ("--shot", int, "shot"), ("--input-dim", int, "input_dim"),
                   ("--drift-kind", str, "drift_kind"), ("--drift-severity", float, "drift_severity"),
                   ("--class-std", float, "class_std"), ("--target-samples", int, "target_samples_per_session")]
_ADAPT_FLAGS = [("--rho", float, "rho"), ("--beta", float, "beta"),
                ("--entropy-threshold", float, "entropy_threshold"),
                ("--collapse-threshold", float, "collapse_threshold"), ("--ema-decay", float, "ema_decay"),
                ("--adapt-lr", float, "lr"), ("--adapt-momentum", float, "momentum"),
                ("--adapt-batch-size", int, "batch_size"), ("--subset", str, "subset"),
                ("--adapt-epochs", int, "epochs")]
_TRAIN_FLAGS = [("--epochs", int, "epochs"), ("--batch-size", int, "batch_size"), ("--lr", float, "lr"),
                ("--momentum", float, "momentum"), ("--weight-decay", float, "weight_decay")]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _add_group(p, title, flags, prefix):
    g = p.add_argument_group(title)
    for flag, typ, name in flags:
        g.add_argument(flag, type=typ, dest=f"{prefix}{name}", default=None)


def _common(p):
    p.add_argument("--config", help="scenario file (key = value lines)")
    p.add_argument("--seed", type=int, default=None, help="defaults to the scenario file's seed")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--hidden", type=int, nargs="+", default=None)
    p.add_argument("--activation", choices=("tanh", "relu"), default=None)
    p.add_argument("--eval-samples", type=int, default=None)
    p.add_argument("--output-dir", default=None)
    _add_group(p, "scenario", _SCENARIO_FLAGS, "sc_")
    _add_group(p, "base training", _TRAIN_FLAGS, "tr_")


def _adaptive(p):
    _add_group(p, "adaptation", _ADAPT_FLAGS, "ad_")
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="overrides --seed")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csfa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    tb = sub.add_parser("train-base", help="train the extractor on the base session and save it")
    _common(tb)
    tb.add_argument("--model", required=True, help="output model file")

    r = sub.add_parser("run", help="run one method over a scenario")
    _common(r)
    _adaptive(r)
    r.add_argument("--method", default="csfa", choices=tuple(harness.METHODS))
    r.add_argument("--model", help="model file from train-base (skips base training)")
    r.add_argument("--diagnostics", help="append per-step adaptation diagnostics to this CSV")

    a = sub.add_parser("ablate", help="run v1, v2, v3 and the full method")
    _common(a)
    _adaptive(a)

    g = sub.add_parser("grid", help="vary one parameter with the rest fixed")
    _common(g)
    _adaptive(g)
    g.add_argument("--method", default="csfa", choices=tuple(harness.METHODS))
    g.add_argument("--parameter", required=True, choices=harness.GRID_PARAMETERS)
    g.add_argument("--values", required=True, nargs="+")

    s = sub.add_parser("scenario", help="scenario utilities")
    ssub = s.add_subparsers(dest="action", parser_class=_Parser, required=True)
    d = ssub.add_parser("dump", help="write every stream of a scenario to a CSV file")
    d.add_argument("--config")
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--out", required=True)
    _add_group(d, "scenario", _SCENARIO_FLAGS, "sc_")
    return p


def _overrides(args, prefix):
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def scenario_from_args(args) -> ScenarioSpec:
    spec = load_spec(args.config) if getattr(args, "config", None) else ScenarioSpec()
    return replace(spec, **_overrides(args, "sc_")).validate()


def config_from_args(args) -> harness.RunConfig:
    spec = scenario_from_args(args)
    cfg = harness.RunConfig(scenario=spec, seed=spec.seed if args.seed is None else args.seed)
    top = {k: getattr(args, k) for k in ("tau", "alpha", "activation", "eval_samples", "output_dir")
           if getattr(args, k, None) is not None}
    if args.hidden:
        top["hidden"] = tuple(args.hidden)
    if getattr(args, "method", None):
        top["method"] = args.method
    cfg = replace(cfg, **top, train=replace(cfg.train, **_overrides(args, "tr_")))
    if any(k.startswith("ad_") for k in vars(args)):
        cfg = replace(cfg, adapt=replace(cfg.adapt, **_overrides(args, "ad_")))
    return cfg.validate()


def _seeds(args, cfg):
    return args.seeds if getattr(args, "seeds", None) else [cfg.seed]


def _print_tables(tables):
    sys.stdout.write("".join(t.to_csv(header=(k == 0)) for k, t in enumerate(tables)))


def cmd_train_base(args):
    cfg = config_from_args(args)
    scenario = Scenario(replace(cfg.scenario, seed=cfg.seed))
    trained = harness._base_model(cfg, scenario)
    save_model(args.model, trained.bank, trained.params, trained.head)
    print(f"base accuracy {trained.train_accuracy:.4f}; model written to {args.model}")


def cmd_run(args):
    cfg = config_from_args(args)
    pretrained = None
    if args.model:
        bank, params, head = load_model(args.model)
        if params is None:
            raise ArgumentError(f"{args.model} holds no extractor")
        pretrained = TrainResult(params, head, bank)
        if head is None and harness.METHODS[cfg.method][0] == "finetune":
            raise ArgumentError(f"{args.model} holds no linear head, needed by {cfg.method}")
    tables = [harness.run(replace(cfg, seed=s), pretrained=pretrained, diagnostics_path=args.diagnostics)
              for s in _seeds(args, cfg)]
    _print_tables(tables)


def cmd_ablate(args):
    cfg = config_from_args(args)
    _print_tables(harness.ablate(cfg, _seeds(args, cfg)))


def cmd_grid(args):
    cfg = config_from_args(args)
    cast = int if args.parameter in ("batch_size", "shot") else float
    try:
        values = [cast(v) for v in args.values]
    except ValueError as exc:
        raise ArgumentError(f"bad grid value: {exc}") from exc
    res = harness.grid(cfg, args.parameter, values, _seeds(args, cfg))
    print(f"{args.parameter},value,mean_average")
    for v, tables in res:
        print(f"{args.parameter},{v},{harness.mean_average(tables)!r}")


def cmd_scenario(args):
    spec = scenario_from_args(args)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    scenario = Scenario(spec)
    out = Path(args.out)
    env = os.environ.get(harness.OUTPUT_ENV)
    if env and not out.is_absolute():
        out = Path(env) / out
    dump_scenario(scenario, out, rng_seed=spec.seed)
    print(f"scenario written to {out}")


COMMANDS = {"train-base": cmd_train_base, "run": cmd_run, "ablate": cmd_ablate, "grid": cmd_grid,
            "scenario": cmd_scenario}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except CSFAError as exc:
        print(f"csfa: error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"csfa: error [io]: {exc}", file=sys.stderr)
        return 7
    return 0


if __name__ == "__main__":
    sys.exit(main())

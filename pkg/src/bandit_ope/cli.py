"""Command-line entry point: ``bandit-ope <command> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when the input data
or configuration cannot be used.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import BanditOPEError, ConstantEstimator
from .datagen import convert_supervised, load_world, read_events, read_multilabel, write_events
from .evaluators import (
    dm_evaluate,
    dr_evaluate,
    drns_evaluate,
    ips_evaluate,
    min_propensity,
    rs_evaluate,
    wc_evaluate,
)
from .harness import ExperimentConfig, ground_truth, run_experiment
from .oracle import (
    bias_experiment,
    coverage_experiment,
    exact_sup_ratio,
    pv_unbiasedness_experiment,
    reachable_states,
    verify_lemmas,
)
from .policies import estimator_from_dict, load_estimator, load_policy, policy_from_dict, uniform_policy

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
CHECKS = ("lemmas", "bias", "pv", "coverage")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    # Accepted before or after the command; the innermost occurrence wins.
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--output", default=default, help="write the report here instead of stdout")
    parser.add_argument("--format", choices=("json", "table"), default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bandit-ope", description="Offline evaluation of contextual-bandit policies.")
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = sub.add_parser("convert", parents=[common], help="supervised multilabel file -> exploration events")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=None, help="number of actions (default: largest label + 1)")

    p = sub.add_parser("evaluate", parents=[common], help="run one evaluator on an events file")
    p.add_argument("--evaluator", required=True, choices=("drns", "wc", "rs", "dm", "ips", "dr"))
    p.add_argument("--events", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--rhat", default=None, help="reward model (default: constant 0)")
    p.add_argument("--q", type=float, default=0.05)
    p.add_argument("--cmax", type=float, default=1.0)
    p.add_argument("--c", type=float, default=None, help="wc/rs cap (default: minimum logged propensity)")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--trace", action="store_true", help="include the per-event trace")

    p = sub.add_parser("experiment", parents=[common], help="run a configured experiment")
    p.add_argument("--config", required=True)

    p = sub.add_parser("ground-truth", parents=[common], help="report the ground truth of a configuration")
    p.add_argument("--config", required=True)

    p = sub.add_parser("diagnose", parents=[common], help="oracle checks on an enumerable world")
    p.add_argument("--world", required=True)
    p.add_argument("--check", choices=CHECKS + ("all",), default="all")
    p.add_argument("--policy", default=None, help="target policy (default: world 'target' or uniform)")
    p.add_argument("--rhat", default=None, help="reward model (default: world 'rhat' or constant 0.5)")
    p.add_argument("--q", type=float, default=0.0)
    p.add_argument("--cmax", type=float, default=1.0)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--events", type=int, default=200)
    p.add_argument("--T", type=int, default=2, help="rounds for the bias check")
    p.add_argument("--depth", type=int, default=2, help="history length enumerated for lemma states")
    p.add_argument("--delta", type=float, default=0.05)
    return parser


# -- commands -------------------------------------------------------------------

def _cmd_convert(args) -> tuple[Any, str | None]:
    data = read_multilabel(args.input, args.k)
    events = convert_supervised(data, seed=args.seed or 0)
    if args.output is None:
        raise UsageError("convert: --output is required")
    write_events(events, args.output)
    return {"events": len(events), "n_actions": data.n_actions, "output": args.output}, None


def _cmd_evaluate(args) -> tuple[Any, str | None]:
    events = read_events(args.events)
    policy = load_policy(args.policy)
    rhat = load_estimator(args.rhat) if args.rhat else ConstantEstimator(0.0, policy.n_actions)
    seed = args.seed or 0
    kind = args.evaluator
    if kind in ("dm", "ips", "dr"):
        fn = {"dm": lambda: dm_evaluate(events, policy, rhat), "ips": lambda: ips_evaluate(events, policy),
              "dr": lambda: dr_evaluate(events, policy, rhat)}[kind]
        return {"evaluator": kind, "estimate": fn(), "events_used": len(events)}, None
    if kind == "drns":
        res = drns_evaluate(events, policy, rhat, q=args.q, c_max=args.cmax, seed=seed,
                            horizon=args.horizon, trace=args.trace)
    elif kind == "wc":
        c = args.c if args.c is not None else min_propensity(events)
        res = wc_evaluate(events, policy, rhat, c, seed=seed, horizon=args.horizon, trace=args.trace)
    else:
        c = args.c if args.c is not None else min_propensity(events)
        res = rs_evaluate(events, policy, c, seed=seed, horizon=args.horizon, trace=args.trace)
    return {"evaluator": kind, **res.to_dict(include_trace=args.trace)}, None


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_experiment(args) -> tuple[Any, str | None]:
    cfg = _load_config(args)
    table = run_experiment(cfg)
    if cfg.output and args.output is None:
        Path(cfg.output).write_text(table.to_json())
    return table, table.to_text()


def _cmd_ground_truth(args) -> tuple[Any, str | None]:
    return ground_truth(_load_config(args)), None


def _world_extras(path: str) -> tuple[dict | None, dict | None]:
    """Optional ``target`` policy and ``rhat`` estimator documents stored beside the world tables."""
    doc = json.loads(Path(path).read_text())
    return doc.get("target"), doc.get("rhat")


def _cmd_diagnose(args) -> tuple[Any, str | None]:
    world = load_world(args.world)
    target, rhat_doc = _world_extras(args.world)
    if args.policy:
        policy = load_policy(args.policy)
    elif target:
        policy = policy_from_dict(target)
    else:
        policy = uniform_policy(world.n_actions)
    if args.rhat:
        rhat = load_estimator(args.rhat)
    elif rhat_doc:
        rhat = estimator_from_dict(rhat_doc)
    else:
        rhat = ConstantEstimator(0.5, world.n_actions)
    seed = args.seed or 0
    checks = CHECKS if args.check == "all" else (args.check,)
    report: dict[str, Any] = {}
    for check in checks:
        if check == "lemmas":
            states = reachable_states(world, policy, max_len=args.depth)
            r = verify_lemmas(world, policy, rhat, states).to_dict()
            r.pop("states")
            r["n_states"] = len(states)
        elif check == "bias":
            r = bias_experiment(world, policy, rhat, args.q, args.cmax, args.T, runs=args.runs, seed=seed,
                                n_events=args.events).to_dict()
        elif check == "pv":
            r = pv_unbiasedness_experiment(world, policy, rhat, args.q, args.cmax, args.events, args.runs,
                                           seed=seed).to_dict()
            r["passed"] = r["within_3_se"]
        else:
            M = exact_sup_ratio(world, policy)
            r = coverage_experiment(world, policy, rhat, args.q, args.cmax, args.events, args.runs, M,
                                    seed=seed, delta=args.delta).to_dict()
        report[check] = r
    report["passed"] = all(bool(report[c]["passed"]) for c in checks)
    lines = [f"{c}: {'PASS' if report[c]['passed'] else 'FAIL'}" for c in checks]
    lines.append(f"overall: {'PASS' if report['passed'] else 'FAIL'}")
    return report, "\n".join(lines) + "\n"


COMMANDS = {
    "convert": _cmd_convert,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "ground-truth": _cmd_ground_truth,
    "diagnose": _cmd_diagnose,
}


# -- output -------------------------------------------------------------------------

def _finite(obj):
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _render(result, text: str | None, fmt: str) -> str:
    if hasattr(result, "to_json"):
        return result.to_json() if fmt == "json" else text
    if fmt == "table":
        if text is not None:
            return text
        return "".join(f"{k}: {_scalar(v)}\n" for k, v in result.items())
    return json.dumps(_finite(result), indent=1, sort_keys=True) + "\n"


def _scalar(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (dict, list)):
        return json.dumps(_finite(v), sort_keys=True)
    return str(v)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result, text = COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (BanditOPEError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"bandit-ope: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    default_fmt = "table" if args.command == "experiment" else "json"
    out = _render(result, text, args.format or default_fmt)
    if args.output and args.command != "convert":
        Path(args.output).write_text(out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


cli = main

if __name__ == "__main__":
    sys.exit(main())

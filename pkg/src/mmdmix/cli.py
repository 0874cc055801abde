"""Command line front door: ``mmdmix train | eval | selftest | summarize``.

Exit codes: 0 success, 2 configuration error, 3 runtime contract violation,
4 self-test failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import selftest as st
from .config import from_flat, parse_config
from .diffcore import load_checkpoint
from .envs import ENV_NAMES, make_env
from .errors import ConfigError, ContractViolation, MMDMixError, SelfTestFailure
from .learner import Learner
from .summarize import format_table, summarize
from .training import evaluate, run_training

log = logging.getLogger("mmdmix")


def cmd_train(args) -> int:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    result = run_training(cfg, args.out, progress=not args.quiet)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"{cfg.label()} seed={cfg.seed} env_steps={result.env_steps} episodes={result.episodes} "
              f"return_mean={last.eval_return_mean:.4f} success_rate={last.eval_success_rate:.4f}")
    print(f"wrote {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {args.episodes}")
    store, _, meta = load_checkpoint(args.checkpoint)
    cfg = from_flat(meta.get("config", {}))
    if args.env is not None:
        cfg.env.name = args.env
    env_info = make_env(cfg.env, seed=0).env_info()
    learner = Learner(cfg, env_info, np.random.default_rng(0))
    if learner.params.names() != store.names() or any(
        learner.params.values[k].shape != store.values[k].shape for k in store.names()
    ):
        raise ConfigError(f"checkpoint {args.checkpoint} does not fit environment {cfg.env.name!r}")
    learner.params.load_from(store)
    summary = evaluate(learner, cfg, args.episodes, args.seed)
    print(f"episodes={summary.episodes} return_mean={summary.return_mean!r} "
          f"return_median={summary.return_median!r} success_rate={summary.success_rate!r}")
    return 0


def cmd_selftest(args) -> int:
    faults = tuple(args.inject_fault or ())
    results = st.run_all(faults)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    grads = next(r for r in results if r.name == "gradients")
    print(f"worst gradient-check relative error: {grads.metrics['worst']:.3g}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise SelfTestFailure("failed suites: " + ", ".join(failed))
    print(f"all {len(results)} suites passed")
    return 0


def cmd_summarize(args) -> int:
    curves = summarize(args.runs, args.out, figure=not args.no_figure)
    print(format_table(curves))
    print(f"wrote {Path(args.out) / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdmix", description="Distributional value-decomposition experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one run and write manifest, metrics and checkpoints")
    train.add_argument("--config", help="YAML file of (dotted) config keys; omitted means defaults")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    train.add_argument("--seed", type=int, help="master seed (overrides the config)")
    train.add_argument("--out", required=True, help="run directory to create")
    train.add_argument("--quiet", action="store_true", help="no progress logging")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--env", choices=ENV_NAMES, help="environment (defaults to the one trained on)")
    ev.add_argument("--episodes", type=int, default=32)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    test = sub.add_parser("selftest", help="run the built-in property suites")
    test.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    test.set_defaults(func=cmd_selftest)

    summ = sub.add_parser("summarize", help="median and 25/75 percentile curves across runs")
    summ.add_argument("runs", nargs="+", metavar="DIR")
    summ.add_argument("--out", default=".", help="directory for summary.csv, summary.json and summary.png")
    summ.add_argument("--no-figure", action="store_true", help="skip the PNG")
    summ.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except MMDMixError as exc:
        kind = {ConfigError: "config error", ContractViolation: "contract violation",
                SelfTestFailure: "self-test failure"}.get(type(exc), "error")
        sys.stdout.flush()
        print(f"mmdmix: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

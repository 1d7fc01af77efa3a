"""Command-line entry point: ``mirror-mdp run | gen-garnet | validate | selftest``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .experiment import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, ALGORITHMS, ConfigError, load_config, parse_seeds, \
    run_experiment
from .garnet import GarnetSpec, generate_garnet
from .generative import GenerativeModel
from .mdp import load_mdp, save_mdp, validate_mdp
from .variance import concentration_selftest, write_selftest_csv


def _unit_float(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirror-mdp", description="Value mirror descent solvers for tabular MDPs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a YAML config")
    run.add_argument("--config", required=True)
    run.add_argument("--algo", choices=ALGORITHMS)
    run.add_argument("--geometry")
    run.add_argument("--regularizer")
    run.add_argument("--gamma", type=_unit_float)
    run.add_argument("--epsilon", type=_unit_float)
    run.add_argument("--delta", type=_unit_float)
    run.add_argument("--scale", type=_unit_float)
    run.add_argument("--seeds", help="comma-separated seeds or ranges, e.g. 0,1,5-9")
    run.add_argument("--out")
    run.add_argument("--workers", type=int)
    audit = run.add_mutually_exclusive_group()
    audit.add_argument("--audit", dest="audit", action="store_true", default=None)
    audit.add_argument("--no-audit", dest="audit", action="store_false")

    gen = sub.add_parser("gen-garnet", help="write a Garnet MDP as JSON")
    gen.add_argument("--states", type=int, required=True)
    gen.add_argument("--actions", type=int, required=True)
    gen.add_argument("--branch", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--gamma", type=_unit_float, default=0.9)
    gen.add_argument("--out", required=True)

    val = sub.add_parser("validate", help="check an MDP file")
    val.add_argument("--mdp", required=True)

    st = sub.add_parser("selftest", help="empirical coverage of the Hoeffding and Bernstein bounds")
    st.add_argument("--mdp", required=True)
    st.add_argument("--m", type=int, default=100)
    st.add_argument("--delta", type=_unit_float, default=0.05)
    st.add_argument("--trials", type=int, default=10_000)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out", required=True)
    return parser


def _cmd_run(args) -> int:
    overrides = {
        "algorithm": args.algo, "geometry": args.geometry, "regularizer": args.regularizer,
        "gamma": args.gamma, "epsilon": args.epsilon, "delta": args.delta, "scale": args.scale,
        "out": args.out, "workers": args.workers, "audit": args.audit,
    }
    if args.seeds is not None:
        overrides["seeds"] = parse_seeds(args.seeds, "flag --seeds")
    cfg = load_config(args.config, overrides)
    status = run_experiment(cfg)
    print(f"wrote results to {cfg.out} ({'ok' if status == EXIT_OK else 'invariant failure'})")
    return status


def _cmd_gen(args) -> int:
    try:
        spec = GarnetSpec(args.states, args.actions, args.branch, args.seed, gamma=args.gamma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_mdp(generate_garnet(spec), args.out)
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        mdp = load_mdp(args.mdp)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    problems = validate_mdp(mdp)
    for p in problems:
        print(p)
    if not problems:
        print(f"{args.mdp}: valid ({mdp.n_states} states, {mdp.n_actions} actions, gamma={mdp.gamma})")
    return EXIT_INVARIANT if problems else EXIT_OK


def _cmd_selftest(args) -> int:
    try:
        mdp = load_mdp(args.mdp)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    model = GenerativeModel(mdp, master_seed=args.seed)
    rng = np.random.default_rng(args.seed)
    v = rng.uniform(0.0, mdp.value_bound(), size=mdp.n_states)
    results = []
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            r = concentration_selftest(model, v, args.m, args.delta, args.trials, s=s, a=a)
            results.append(r)
    write_selftest_csv(results, args.out)
    worst = max(max(r["hoeffding"], r["bernstein"]) for r in results)
    return EXIT_OK if worst <= args.delta else EXIT_INVARIANT


COMMANDS = {"run": _cmd_run, "gen-garnet": _cmd_gen, "validate": _cmd_validate, "selftest": _cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime
failure (divergence, corrupt file, environment generation failure).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import harness
from .simenv import GenerationError
from .trainkit import FormatError, TrainingDivergence, load_bundle, load_dataset

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("goalflow")


def build_parser():
    p = argparse.ArgumentParser(prog="goalflow", description="Goal-conditioned flow-matching policy toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="run configuration (key = value lines)")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--out", required=True)
        return sp

    sp = add("gen-demos", "generate scripted demonstrations")
    sp.add_argument("--n", type=int, help="number of demos (default run.n_demos)")
    sp.add_argument("--variant", choices=harness.VARIANTS, default="id")

    for stage in (1, 2):
        sp = add(f"train-stage{stage}", f"stage-{stage} training")
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--bundle", required=(stage == 2), help="starting bundle")
        sp.add_argument("--trace", help="loss trace CSV (default <out>.trace.csv)")

    sp = add("eval", "evaluate a bundle; writes per-episode rows plus a summary row")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--variant", choices=harness.VARIANTS, default="id")
    sp.add_argument("--disturb", action="store_true", help="inject one mid-episode disturbance")

    sp = add("ablate-msth", "train and compare the scheduled policy against M = 0")
    sp.add_argument("--dataset", help="trace demos (generated from the config when omitted)")
    sp.add_argument("--episodes", type=int)

    sp = add("online-improve", "reward-free online improvement; --out is a directory")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--strategy", choices=("all", "success_only", "failed_only"))
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--variant", choices=harness.VARIANTS, default="ood")
    return p


def _run(args):
    rc = harness.load_config(args.config)
    if args.seed is not None:
        rc.run = replace(rc.run, seed=args.seed)
    rc.validate()
    cmd = args.command
    if cmd == "gen-demos":
        demos = harness.gen_demos(rc, args.n or rc.run.n_demos, args.out, args.variant)
        log.info("wrote %d demos to %s", len(demos), args.out)
    elif cmd in ("train-stage1", "train-stage2"):
        stage = int(cmd[-1])
        _, trace = harness.train_file(rc, stage, args.dataset, args.out, args.bundle, args.trace)
        log.info("stage %d done: final total loss %.5f", stage, trace[-1].total if trace else float("nan"))
    elif cmd == "eval":
        bundle = load_bundle(args.bundle)
        rate = harness.eval_report(rc, bundle, args.episodes or rc.run.episodes, args.variant, args.disturb, args.out)
        print(f"success_rate={rate!r}")
    elif cmd == "ablate-msth":
        data = load_dataset(args.dataset).trajectories if args.dataset else None
        rows, _ = harness.ablate_msth(rc, args.out, data, args.episodes)
        for r in rows:
            print(",".join(str(x) for x in r))
    elif cmd == "online-improve":
        bundle = load_bundle(args.bundle)
        reports = harness.online_improve(rc, bundle, args.rounds, args.out, args.strategy, args.episodes,
                                         args.variant)
        for r in reports:
            print(f"round {r.round}: eval_success_rate={r.eval_success_rate!r}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except harness.RunConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, FormatError, GenerationError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

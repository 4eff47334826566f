"""Command-line interface.

Subcommands: train, baseline, evaluate, scenario, compare.  All training
parameters can come from a JSON config file (--config) with flag overrides;
the master seed is mandatory for training so every run is reproducible.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import env, harness
from .config import PROFILES, settings_from_sources


def _add_settings_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--config", help="JSON file with TrainSettings overrides")
    p.add_argument("--steps", type=int, dest="total_steps")
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    p.add_argument("--members", type=int, dest="ensemble_size")
    p.add_argument("--prior-scale", type=float, dest="prior_scale")
    p.add_argument("--vehicles", type=int, dest="n_vehicles")


def _settings(args):
    overrides = {k: getattr(args, k, None) for k in
                 ("total_steps", "eval_interval", "eval_episodes",
                  "ensemble_size", "prior_scale", "n_vehicles")}
    return settings_from_sources(args.profile, args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="highway-rpf",
        description="Train and probe uncertainty-aware highway driving agents")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training session with periodic evaluation")
    p_train.add_argument("--agent", choices=("rpf", "dqn"), required=True)
    p_train.add_argument("--seed", type=int, required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--resume", help="checkpoint directory with run state")
    _add_settings_flags(p_train)

    p_base = sub.add_parser("baseline", help="heuristic-driver returns on the fixed suite")
    p_base.add_argument("--seed", type=int, required=True)
    p_base.add_argument("--out", required=True)
    _add_settings_flags(p_base)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint (or the heuristic) on the fixed suite")
    p_eval.add_argument("--agent", choices=harness.AGENT_KINDS, default="rpf")
    p_eval.add_argument("--checkpoint", help="checkpoint directory (rpf/dqn)")
    p_eval.add_argument("--seed", type=int, required=True)
    p_eval.add_argument("--out", required=True)
    _add_settings_flags(p_eval)

    p_scen = sub.add_parser("scenario", help="replay an out-of-distribution scenario with an uncertainty trace")
    p_scen.add_argument("--checkpoint", required=True)
    p_scen.add_argument("--scenario", choices=env.SCENARIO_KINDS, required=True)
    p_scen.add_argument("--gate", choices=("on", "off"), default="off")
    p_scen.add_argument("--cv-safe", type=float, default=None,
                        help="uncertainty threshold for the gate (default: from settings)")
    p_scen.add_argument("--seed", type=int, default=0)
    p_scen.add_argument("--scenario-config", help="JSON ScenarioConfig file")
    p_scen.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="align several runs' metrics into one report")
    p_cmp.add_argument("runs", nargs="+", help="run output directories")
    p_cmp.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "train":
        settings = _settings(args)
        harness.run_training_session(args.agent, settings, args.seed, args.out,
                                     resume_path=args.resume)
        print(f"metrics written to {os.path.join(args.out, 'metrics.csv')}")
        return 0

    if args.command == "baseline":
        settings = _settings(args)
        returns = harness.ensure_baseline(settings, args.seed, args.out)
        print(f"baseline over {len(returns)} episodes: mean discounted return "
              f"{returns.mean():.3f} (written to {os.path.join(args.out, 'baseline.csv')})")
        return 0

    if args.command == "evaluate":
        settings = _settings(args)
        os.makedirs(args.out, exist_ok=True)
        baseline = harness.ensure_baseline(settings, args.seed, args.out)
        if args.agent == "heuristic":
            agent = "heuristic"
        else:
            if not args.checkpoint:
                parser.error("--checkpoint is required unless --agent heuristic")
            agent, _ = harness.load_checkpoint(args.checkpoint)
        result = harness.evaluate_suite(agent, settings, args.seed, baseline)
        harness._append_csv(os.path.join(args.out, "metrics.csv"),
                            harness.METRICS_COLUMNS, [result.csv_row()])
        print(f"collision-free {result.collision_free_fraction:.2f}, "
              f"normalized return {result.mean_normalized_return:.3f}")
        return 0

    if args.command == "scenario":
        agent, manifest = harness.load_checkpoint(args.checkpoint)
        if args.scenario_config:
            scenario = env.load_scenario_config(args.scenario_config)
        else:
            scenario = env.ScenarioConfig(kind=args.scenario)
        if scenario.kind != args.scenario:
            parser.error(f"--scenario {args.scenario} does not match config kind {scenario.kind}")
        cv_safe = args.cv_safe if args.cv_safe is not None else agent.settings.cv_safe
        os.makedirs(args.out, exist_ok=True)
        trace_path = os.path.join(args.out, f"trace_{args.scenario}.csv")
        summary, _ = harness.run_ood_scenario(agent, scenario, args.gate == "on",
                                              cv_safe, trace_path, seed=args.seed)
        print(f"scenario {args.scenario}: steps={summary['steps']} "
              f"collision={summary['collision']} fallback_steps={summary['fallback_steps']} "
              f"max_chosen_cv={summary['max_chosen_cv']:.4g}")
        print(f"trace written to {trace_path}")
        return 0

    if args.command == "compare":
        os.makedirs(args.out, exist_ok=True)
        text = harness.compare_report(args.runs,
                                      out_csv=os.path.join(args.out, "report.csv"),
                                      out_txt=os.path.join(args.out, "report.txt"))
        print(text, end="")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: ``vhmpc {run,train,eval,compare,selftest}``.

Exit codes: 0 success, 1 usage or configuration error, 2 task failure
(collision or timeout).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import sac, sim
from .errors import ConfigError, VhmpcError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TASK = 2

CHECKPOINT_NAME = "agent.ckpt"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _horizon_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty horizon list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vhmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver fallbacks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, horizon_help="fixed horizon override"):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--terminate-on-collision", type=_bool, default=None, metavar="BOOL")
        return p

    p_run = common(sub.add_parser("run", help="run one episode"))
    p_run.add_argument("--horizon", type=int, default=None, help="fixed horizon override")
    p_run.add_argument("--checkpoint", default=None, help="drive horizons with a trained agent")

    p_train = common(sub.add_parser("train", help="train the horizon policy"))
    p_train.add_argument("--episodes", type=int, default=300)
    p_train.add_argument("--checkpoint", default=None, help="resume from this agent checkpoint")

    p_eval = common(sub.add_parser("eval", help="evaluate a trained agent deterministically"))
    p_eval.add_argument("--checkpoint", required=True)

    p_cmp = common(sub.add_parser("compare", help="compare fixed horizons and a trained agent"))
    p_cmp.add_argument("--horizon", type=_horizon_list, default=[10, 20, 30],
                       help="comma-separated fixed horizons (default 10,20,30)")
    p_cmp.add_argument("--checkpoint", default=None)

    p_self = sub.add_parser("selftest", help="run the built-in property checks")
    p_self.add_argument("--seed", type=int, default=0)
    p_self.add_argument("--quick", action="store_true", help="fewer random cases")
    return parser


def _scenario(args) -> sim.Scenario:
    sc = sim.load_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    if args.terminate_on_collision is not None:
        sc = replace(sc, terminate_on_collision=args.terminate_on_collision)
    return sc.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_episode(out: Path, result: sim.EpisodeResult) -> None:
    (out / "trajectory.csv").write_text(sim.trajectory_csv(result))
    (out / "metrics.json").write_text(sim.metrics_json(result))
    # wall-clock time lives apart so the files above stay byte-reproducible
    (out / "timing.json").write_text(json.dumps({"wall_time": result.metrics.wall_time}) + "\n")


def _episode_exit(result: sim.EpisodeResult) -> int:
    print(f"{result.termination}: steps={result.steps} path_cost={result.metrics.path_cost:.4f} "
          f"activations={result.metrics.constraint_activations}")
    return EXIT_OK if result.completed else EXIT_TASK


def cmd_run(args) -> int:
    sc = _scenario(args)
    if args.checkpoint is not None:
        sc = sc.with_policy(args.checkpoint)
    elif args.horizon is not None:
        sc = sc.with_fixed_horizon(args.horizon)
    result = sim.run_episode(sc)
    _write_episode(_out_dir(args), result)
    return _episode_exit(result)


def cmd_eval(args) -> int:
    sc = _scenario(args).with_policy(args.checkpoint)
    result = sim.run_episode(sc)
    _write_episode(_out_dir(args), result)
    return _episode_exit(result)


def cmd_train(args) -> int:
    sc = _scenario(args)
    if args.episodes < 0:
        raise ConfigError("--episodes must be >= 0")
    env = sim.MultiRobotEnv(sc)
    if args.checkpoint is not None:
        agent = sac.load_agent(args.checkpoint)
        if agent.n_robots != sc.n_robots:
            raise ConfigError(f"checkpoint is for {agent.n_robots} robots, scenario has {sc.n_robots}")
    else:
        agent = sac.SacAgent(sc.n_robots, sac.SacConfig(n_max=sc.params.N_max), seed=sc.seed)
    log = sac.train(env, agent, args.episodes, seed=sc.seed)
    out = _out_dir(args)
    (out / "training_log.csv").write_text(log.to_csv())
    agent.save(out / CHECKPOINT_NAME)
    print(f"trained {args.episodes} episodes; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _scenario(args)
    if args.checkpoint is not None:
        sac.load_agent(args.checkpoint)   # fail early on unreadable checkpoints
    rows = sim.compare(sc, args.horizon, args.checkpoint)
    out = _out_dir(args)
    (out / "comparison.csv").write_text(sim.comparison_csv(rows))
    timing = "label,wall_time\n" + "".join(f"{r.label},{r.result.metrics.wall_time!r}\n" for r in rows)
    (out / "timing.csv").write_text(timing)
    for r in rows:
        flag = "" if r.result.completed else "  [incomplete]"
        print(f"{r.label:>6}  path_cost={r.result.metrics.path_cost:10.4f}  "
              f"activations={r.result.metrics.constraint_activations:6d}  "
              f"time={r.result.metrics.completion_time:6.1f}s{flag}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(seed=args.seed, quick=args.quick) else EXIT_TASK


COMMANDS = {
    "run": cmd_run,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (VhmpcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

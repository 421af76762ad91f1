"""Command-line entry point: ``marollout <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path


from . import harness as H
from .a2pi import PolicyPool
from .config import resolve
from .env import write_episode_log
from .traffic import write_snapshots

log = logging.getLogger("marollout")


def _scenario(args):
    scen = resolve(args.scenario)
    tc = scen.training
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
        if args.mode == "shared":
            changes["n_agents"] = 1
    if getattr(args, "sweeps", None) is not None:
        changes["sweeps"] = args.sweeps
    if getattr(args, "episodes", None) is not None:
        changes["episodes_per_update"] = args.episodes
    if getattr(args, "train_seed", None) is not None:
        changes["seed"] = args.train_seed
    if changes:
        scen = scen.replace(training=dataclasses.replace(tc, **changes))
    return scen


def _seeds(args, scen):
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",")]
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return list(scen.training.eval_seeds)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> None:
    scen = _scenario(args)
    out = _out(args)
    seed = args.seed if args.seed is not None else scen.seed
    env = scen.make_env()
    rows = []
    snaps = []

    env.reset(seed, control=False)
    done = False
    while not done:
        res = env.step({})
        done = res.done
        if args.dump:
            snaps.extend(env.sim.snapshot())
    rows.append(H.ResultRow(scen.name, H.NO_CONTROL, seed,
                            float(sum(r["reward"] for r in env.log)), env.sim.travel_time_stats().avg_tt))
    write_episode_log(env.log, out / "episode_log.csv")
    if args.dump:
        write_snapshots(snaps, out / "states.jsonl")
    H.write_results(out / "results.csv", rows)
    H.write_manifest(out, "simulate", scen, vars(args))
    print(H.format_summary(H.summarize(rows)), end="")


def cmd_train(args) -> None:
    scen = _scenario(args)
    out = _out(args)
    seeds = _seeds(args, scen)
    algo = H.ALGORITHMS[args.algo]
    if algo == H.NO_CONTROL:
        rows = [H.run_no_control(scen, s) for s in seeds]
        H.write_results(out / "results.csv", rows)
        H.write_csv(out / "reward_curve.csv", [], H.REWARD_CURVE_FIELDS)
    else:
        runner = H.run_marollout if algo == H.MA_ROLLOUT else H.run_simultaneous_ppo
        run = runner(scen, seeds, checkpoint_dir=out / "checkpoints")
        rows = run.rows
        H.write_results(out / "results.csv", rows)
        H.write_csv(out / "learning_curve.csv", run.curve, H.CURVE_FIELDS)
        H.write_csv(out / "reward_curve.csv", run.reward_curve, H.REWARD_CURVE_FIELDS)
        H.write_csv(out / "training_stats.csv", run.stats, H.STATS_FIELDS)
        run.pool.save(out / "pool")
    H.write_manifest(out, "train", scen, vars(args))
    print(H.format_summary(H.summarize(rows)), end="")


def cmd_evaluate(args) -> None:
    scen = _scenario(args)
    out = _out(args)
    pool = PolicyPool.load(args.pool)
    rows = H.evaluate_rows(scen, pool, _seeds(args, scen), H.ALGORITHMS[args.algo])
    H.write_results(out / "results.csv", rows)
    H.write_manifest(out, "evaluate", scen, vars(args), [Path(args.pool)])
    print(H.format_summary(H.summarize(rows)), end="")


def cmd_sweep(args) -> None:
    scen = _scenario(args)
    out = _out(args)
    pools = {}
    for item in args.pool or []:
        pen, path = item.split("=", 1)
        pools[float(pen)] = PolicyPool.load(path)
    spec = H.ExperimentSpec(scen, seeds=_seeds(args, scen))
    if args.inflows:
        spec.inflow_grid = [float(x) for x in args.inflows.split(",")]
    if args.penetrations:
        spec.penetration_grid = [float(x) for x in args.penetrations.split(",")]
    rows = H.sensitivity_sweep(spec, pools)
    H.write_csv(out / "sensitivity.csv", rows, H.SWEEP_FIELDS)
    H.write_manifest(out, "sweep", scen, vars(args), [Path(p.split("=", 1)[1]) for p in args.pool or []])
    for pen in spec.penetration_grid:
        ok = [r for r in rows if r["penetration"] == pen and r["status"] == "ok"]
        if ok:
            print(f"penetration {pen:.2f}: NoControl Avg.TT vs inflow spearman "
                  f"{H.inflow_trend(rows, pen):.3f}")


def cmd_report(args) -> None:
    out = _out(args)
    rows = []
    for path in args.results:
        rows.extend(H.read_results(path))
    curves = {}
    for item in args.curve or []:
        alg, path = item.split("=", 1)
        with open(path) as fh:
            import csv
            curves[alg] = list(csv.DictReader(fh))
    text = H.report(rows, out, curves)
    H.write_manifest(out, "report", None, vars(args), [Path(p) for p in args.results])
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marollout", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--scenario", default="congestion",
                        help="built-in name (congestion, dynamic, dynamic_smoke) or YAML file")
        sp.add_argument("--out", required=True, help="output directory")
        if seeds:
            sp.add_argument("--seed", type=int, default=None)
            sp.add_argument("--seeds", default=None, help="comma-separated evaluation seeds")

    sp = sub.add_parser("simulate", help="uncontrolled run with per-step log and optional state dump")
    common(sp)
    sp.add_argument("--dump", action="store_true", help="write states.jsonl")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a policy pool and evaluate it")
    common(sp)
    sp.add_argument("--algo", choices=sorted(H.ALGORITHMS), default="marollout")
    sp.add_argument("--mode", choices=["fixed", "shared"], default=None)
    sp.add_argument("--sweeps", type=int, default=None)
    sp.add_argument("--episodes", type=int, default=None, help="episodes per policy update")
    sp.add_argument("--train-seed", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a saved pool against NoControl")
    common(sp)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--algo", choices=["marollout", "simppo"], default="marollout")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="inflow x penetration sensitivity grid")
    common(sp)
    sp.add_argument("--pool", action="append", help="PENETRATION=DIR, repeatable")
    sp.add_argument("--inflows", default=None)
    sp.add_argument("--penetrations", default=None)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="per-algorithm summary table from result CSVs")
    sp.add_argument("results", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--curve", action="append", help="ALGORITHM=CSV, repeatable")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # any aborted run must exit nonzero
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

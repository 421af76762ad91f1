"""Experiment protocol: baselines, training runs, sensitivity grids, reports.

All tables are plain CSV with fixed column orders.  Improvements are only
ever computed between runs that share scenario and seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .a2pi import PolicyPool, SweepSchedule, evaluate, run_episode, train
from .config import ScenarioConfig
from .env import observation_dim

NO_CONTROL = "NoControl"
MA_ROLLOUT = "MARollout"
SIMULTANEOUS_PPO = "SimultaneousPPO"
ALGORITHMS = {"nocontrol": NO_CONTROL, "marollout": MA_ROLLOUT, "simppo": SIMULTANEOUS_PPO}

RESULT_FIELDS = ["scenario", "algorithm", "seed", "reward", "avg_tt", "improvement"]
CURVE_FIELDS = ["sweep", "agent", "eval_reward", "eval_avg_tt"]
REWARD_CURVE_FIELDS = ["sweep", "agent", "episode", "reward"]
STATS_FIELDS = ["iteration", "agent", "epoch", "samples", "loss", "policy_loss", "value_loss",
                "entropy", "mean_ratio", "clip_fraction", "approx_kl", "mean_episode_reward"]
SWEEP_FIELDS = ["inflow", "penetration", "seed", "nocontrol_avg_tt", "controlled_avg_tt",
                "improvement", "status"]


@dataclass
class ResultRow:
    scenario: str
    algorithm: str
    seed: int
    reward: float
    avg_tt: float
    improvement: Optional[float] = None


@dataclass
class ExperimentSpec:
    scenario: ScenarioConfig
    algorithm: str = MA_ROLLOUT
    seeds: List[int] = field(default_factory=lambda: [10_001, 10_002, 10_003, 10_004, 10_005])
    out_dir: Optional[Path] = None
    inflow_grid: List[float] = field(default_factory=lambda: [500.0 * k for k in range(1, 9)])
    penetration_grid: List[float] = field(default_factory=lambda: [0.0, 0.05, 0.10, 0.20, 0.40])

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.inflow_grid or not self.penetration_grid:
            raise ValueError("sweep grids must be non-empty")


def improvement(tt_baseline: float, tt_alg: float) -> float:
    """Relative Avg.TT reduction in percent."""
    return (tt_baseline - tt_alg) / tt_baseline * 100.0


def attach_improvements(rows: Sequence[ResultRow]) -> List[ResultRow]:
    """Fill ``improvement`` against the NoControl row with the same scenario and seed."""
    base = {(r.scenario, r.seed): r.avg_tt for r in rows if r.algorithm == NO_CONTROL}
    out = []
    for r in rows:
        imp = None
        if r.algorithm != NO_CONTROL and (r.scenario, r.seed) in base:
            imp = improvement(base[(r.scenario, r.seed)], r.avg_tt)
        out.append(ResultRow(r.scenario, r.algorithm, r.seed, r.reward, r.avg_tt, imp))
    return out


def run_no_control(scenario: ScenarioConfig, seed: int, env=None) -> ResultRow:
    env = env or scenario.make_env()
    res = run_episode(env, None, seed, np.random.default_rng(seed))
    return ResultRow(scenario.name, NO_CONTROL, seed, res.reward, res.avg_tt)


def new_pool(scenario: ScenarioConfig, mode: Optional[str] = None, n_agents: Optional[int] = None,
             seed: Optional[int] = None) -> PolicyPool:
    tc = scenario.training
    return PolicyPool.create(n_agents or tc.n_agents, mode or tc.mode,
                             observation_dim(scenario.network.num_edges), scenario.env.action_bins,
                             tc.seed if seed is None else seed, scenario.ppo_config())


@dataclass
class TrainingRun:
    pool: PolicyPool
    rows: List[ResultRow]
    curve: List[dict]
    reward_curve: List[dict]
    stats: List[dict]


def _train(scenario: ScenarioConfig, algorithm: str, seeds: Sequence[int], pool: Optional[PolicyPool],
           sweeps: Optional[int], checkpoint_dir) -> TrainingRun:
    tc = scenario.training
    env = scenario.make_env()
    pool = pool or new_pool(scenario)
    schedule = SweepSchedule.ascending(len(pool.slots), tc.sweeps if sweeps is None else sweeps,
                                       tc.episodes_per_update)
    reward_curve, stats = [], []

    def on_agent(k, i, _pool, rec):
        mean_r = float(np.mean(rec["episode_rewards"])) if rec["episode_rewards"] else float("nan")
        for e, r in enumerate(rec["episode_rewards"]):
            reward_curve.append({"sweep": k, "agent": i, "episode": e, "reward": r})
        for s in rec["ppo"]:
            stats.append({"iteration": k, "agent": i, **s, "mean_episode_reward": mean_r})

    name = "marollout" if algorithm == MA_ROLLOUT else "simppo"
    pool, curve = train(env, pool, scenario.ppo_config(), schedule, tc.seed, seeds,
                        tc.greedy_eval, name, checkpoint_dir, on_agent)
    rows = evaluate_rows(scenario, pool, seeds, algorithm, env)
    return TrainingRun(pool, rows, curve, reward_curve, stats)


def evaluate_rows(scenario: ScenarioConfig, pool: PolicyPool, seeds: Sequence[int],
                  algorithm: str = MA_ROLLOUT, env=None) -> List[ResultRow]:
    """Frozen-policy rows plus matched NoControl rows, improvements attached."""
    env = env or scenario.make_env()
    ev = evaluate(env, pool, seeds, scenario.training.greedy_eval)
    rows = [run_no_control(scenario, s, env) for s in seeds]
    rows += [ResultRow(scenario.name, algorithm, s, r, tt) for s, r, tt in zip(seeds, ev.rewards, ev.avg_tts)]
    return attach_improvements(rows)


def run_marollout(scenario: ScenarioConfig, seeds: Sequence[int], pool: Optional[PolicyPool] = None,
                  sweeps: Optional[int] = None, checkpoint_dir=None) -> TrainingRun:
    return _train(scenario, MA_ROLLOUT, seeds, pool, sweeps, checkpoint_dir)


def run_simultaneous_ppo(scenario: ScenarioConfig, seeds: Sequence[int], pool: Optional[PolicyPool] = None,
                         sweeps: Optional[int] = None, checkpoint_dir=None) -> TrainingRun:
    return _train(scenario, SIMULTANEOUS_PPO, seeds, pool, sweeps, checkpoint_dir)


def sensitivity_sweep(spec: ExperimentSpec, pools: Mapping[float, PolicyPool]) -> List[dict]:
    """Avg.TT over the inflow x penetration grid, controlled vs uncontrolled.

    Every cell uses constant inflow; penetration 0 needs no pool since there
    is nothing to control.  Cells whose penetration has no pool are marked
    ``skipped``.
    """
    scen = spec.scenario
    rows = []
    for pen in spec.penetration_grid:
        pool = pools.get(pen)
        for rate in spec.inflow_grid:
            env = scen.make_env(penetration=pen, rate=rate)
            for seed in spec.seeds:
                nc = run_episode(env, None, seed, np.random.default_rng(seed)).avg_tt
                if pen == 0:
                    ctrl, status = nc, "ok"
                elif pool is None:
                    ctrl, status = None, "skipped"
                else:
                    ev = evaluate(env, pool, [seed], scen.training.greedy_eval)
                    ctrl, status = ev.avg_tts[0], "ok"
                rows.append({"inflow": rate, "penetration": pen, "seed": seed,
                             "nocontrol_avg_tt": nc, "controlled_avg_tt": ctrl,
                             "improvement": None if ctrl is None else improvement(nc, ctrl),
                             "status": status})
    return rows


def inflow_trend(rows: Sequence[dict], penetration: float) -> float:
    """Spearman correlation of median NoControl Avg.TT against inflow."""
    grid = sorted({r["inflow"] for r in rows if r["penetration"] == penetration})
    med = [np.median([r["nocontrol_avg_tt"] for r in rows
                      if r["penetration"] == penetration and r["inflow"] == q]) for q in grid]
    return float(spearmanr(grid, med).statistic)


def median_improvement(rows: Sequence[dict], penetration: float, inflows: Iterable[float]) -> float:
    inflows = set(inflows)
    vals = [r["improvement"] for r in rows
            if r["penetration"] == penetration and r["inflow"] in inflows and r["status"] == "ok"]
    return float(np.median(vals))


# -- CSV / report --------------------------------------------------------
def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows: Iterable[Mapping], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in fields})


def write_results(path, rows: Sequence[ResultRow]) -> None:
    write_csv(path, [asdict(r) for r in rows], RESULT_FIELDS)


def read_results(path) -> List[ResultRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(ResultRow(rec["scenario"], rec["algorithm"], int(rec["seed"]),
                                 float(rec["reward"]), float(rec["avg_tt"]),
                                 float(rec["improvement"]) if rec["improvement"] else None))
    return out


def summarize(rows: Sequence[ResultRow]) -> List[dict]:
    """One line per (scenario, algorithm): medians over seeds.

    ``Perf`` is the median of per-seed improvements; it is ``--`` for the
    baseline and for algorithms without matched baseline seeds.
    """
    if not rows:
        raise ValueError("report needs at least one row")
    order = [NO_CONTROL, SIMULTANEOUS_PPO, MA_ROLLOUT]
    groups: Dict[tuple, List[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.algorithm), []).append(r)
    keys = sorted(groups, key=lambda k: (k[0], order.index(k[1]) if k[1] in order else len(order), k[1]))
    out = []
    for scen, alg in keys:
        g = groups[(scen, alg)]
        imps = [r.improvement for r in g if r.improvement is not None]
        out.append({"scenario": scen, "algorithm": alg, "seeds": len(g),
                    "reward": float(np.median([r.reward for r in g])),
                    "avg_tt": float(np.median([r.avg_tt for r in g])),
                    "perf": "--" if alg == NO_CONTROL or not imps else f"{np.median(imps):.2f}"})
    return out


def format_summary(summary: Sequence[dict]) -> str:
    header = f"{'Scenario':<16}{'Algorithm':<18}{'Seeds':>6}{'Reward':>12}{'Avg.TT (s)':>12}{'Perf (%)':>10}"
    lines = [header, "-" * len(header)]
    for s in summary:
        lines.append(f"{s['scenario']:<16}{s['algorithm']:<18}{s['seeds']:>6}"
                     f"{s['reward']:>12.1f}{s['avg_tt']:>12.2f}{s['perf']:>10}")
    lines.append("Reward: cumulative shared reward per episode, median over seeds.")
    return "\n".join(lines) + "\n"


def report(rows: Sequence[ResultRow], out_dir, curves: Optional[Mapping[str, Sequence[dict]]] = None) -> str:
    """Write ``summary.txt`` / ``summary.csv`` and one reward-curve CSV per
    algorithm (header only when the algorithm has no training curve)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    text = format_summary(summary)
    (out_dir / "summary.txt").write_text(text)
    write_csv(out_dir / "summary.csv", summary, ["scenario", "algorithm", "seeds", "reward", "avg_tt", "perf"])
    curves = curves or {}
    for alg in sorted({r.algorithm for r in rows} | set(curves)):
        write_csv(out_dir / f"curve_{alg}.csv", curves.get(alg, []), REWARD_CURVE_FIELDS)
    return text


def write_manifest(out_dir, command: str, scenario: Optional[ScenarioConfig], args: Mapping,
                   inputs: Sequence[Path] = ()) -> dict:
    """Resolved config plus a content hash over config, arguments and input files."""
    h = hashlib.sha256()
    h.update(command.encode())
    if scenario is not None:
        h.update(json.dumps(scenario.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(dict(args), sort_keys=True, default=str).encode())
    for p in sorted(Path(x) for x in inputs):
        for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
            if f.is_file():
                h.update(f.name.encode())
                h.update(f.read_bytes())
    manifest = {"command": command, "version": __version__, "python": platform.python_version(),
                "numpy": np.__version__, "args": dict(args),
                "scenario": scenario.to_dict() if scenario is not None else None,
                "input_hash": h.hexdigest(), "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest

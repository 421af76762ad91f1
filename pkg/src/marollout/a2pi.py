"""Agent-by-agent policy iteration with PPO as the per-agent improver.

Within a sweep, agents are visited in schedule order.  Agent ``i`` collects
fresh episodes in which it acts from its own (learning) slot while every
other agent acts from its frozen slot; agents visited earlier in the sweep
therefore already use their updated policies.  Only slot ``i`` is updated.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .env import BottleneckEnv
from .neural import log_softmax
from .ppo import PolicySlot, PpoConfig, Trajectory, ppo_update

log = logging.getLogger(__name__)

FIXED = "fixed"
SHARED = "shared"


class SlotOverflowError(RuntimeError):
    pass


@dataclass
class PolicyPool:
    slots: List[PolicySlot]
    mode: str = FIXED
    iteration: int = 0
    history: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (FIXED, SHARED):
            raise ValueError(f"unknown pool mode {self.mode!r}")
        if self.mode == SHARED and len(self.slots) != 1:
            raise ValueError("a shared-policy pool has exactly one slot")
        if not self.slots:
            raise ValueError("pool needs at least one slot")

    @classmethod
    def create(cls, n_slots: int, mode: str, obs_dim: int, n_actions: int, seed: int,
               cfg: PpoConfig) -> "PolicyPool":
        rng = np.random.default_rng([seed, 0xA2])
        n = 1 if mode == SHARED else n_slots
        slots = [PolicySlot.create(obs_dim, n_actions, rng, cfg.hidden, cfg.lr) for _ in range(n)]
        return cls(slots, mode)

    def digests(self) -> List[str]:
        return [s.digest() for s in self.slots]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, slot in enumerate(self.slots):
            slot.save(directory / f"slot_{i}.npz")
        manifest = {"mode": self.mode, "iteration": self.iteration, "n_slots": len(self.slots),
                    "digests": self.digests(), "history": self.history}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PolicyPool":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        slots = [PolicySlot.load(directory / f"slot_{i}.npz") for i in range(manifest["n_slots"])]
        return cls(slots, manifest["mode"], manifest["iteration"], manifest["history"])


@dataclass(frozen=True)
class SweepSchedule:
    order: Tuple[int, ...]
    sweeps: int = 2
    episodes_per_update: int = 4

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("sweep order must be a permutation of slot indices")
        if self.sweeps < 0 or self.episodes_per_update < 1:
            raise ValueError("invalid schedule sizes")

    @classmethod
    def ascending(cls, n_slots: int, sweeps: int = 2, episodes_per_update: int = 4) -> "SweepSchedule":
        return cls(tuple(range(n_slots)), sweeps, episodes_per_update)


def assign_agents(pool: PolicyPool, entered: Sequence[int], mapping: Dict[int, int]) -> Dict[int, int]:
    """Extend ``mapping`` (agent id -> slot) with newly entered agents.

    Shared pools map everyone to slot 0.  Fixed pools hand out the lowest
    slot not held by a currently controlled agent, in order of arrival.
    """
    mapping = dict(mapping)
    for agent in entered:
        if pool.mode == SHARED:
            mapping[agent] = 0
            continue
        busy = set(mapping.values())
        free = [i for i in range(len(pool.slots)) if i not in busy]
        if not free:
            raise SlotOverflowError(
                f"{len(mapping) + 1} concurrent agents exceed {len(pool.slots)} fixed slots; "
                "use the shared-policy mode for open agent populations")
        mapping[agent] = free[0]
    return mapping


@dataclass
class EpisodeResult:
    reward: float
    avg_tt: float
    trajectories: Dict[int, List[Trajectory]]
    steps: int


def run_episode(env: BottleneckEnv, pool: Optional[PolicyPool], seed: int, rng: np.random.Generator,
                learners: Sequence[int] = (), greedy: bool = False) -> EpisodeResult:
    """Play one episode.

    ``pool=None`` runs the uncontrolled baseline.  Steps of agents mapped to
    a slot in ``learners`` are recorded as trajectories keyed by slot.
    """
    obs = env.reset(seed, control=pool is not None)
    mapping: Dict[int, int] = {}
    open_trajs: Dict[int, Trajectory] = {}
    done_trajs: Dict[int, List[Trajectory]] = {i: [] for i in learners}
    total = 0.0
    entered = list(obs)
    while True:
        actions: Dict[int, int] = {}
        if pool is not None:
            if entered:
                mapping = assign_agents(pool, entered, mapping)
            by_slot: Dict[int, List[int]] = {}
            for agent in sorted(obs):
                by_slot.setdefault(mapping[agent], []).append(agent)
            for slot_idx, agents in sorted(by_slot.items()):
                slot = pool.slots[slot_idx]
                x = np.stack([obs[a] for a in agents])
                logits = slot.actor(x)
                logp = log_softmax(logits)
                learning = slot_idx in done_trajs
                values = slot.value(x) if learning else None
                for row, agent in enumerate(agents):
                    if greedy:
                        a = int(np.argmax(logits[row]))
                    else:
                        cdf = np.cumsum(np.exp(logp[row]))
                        a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                                len(cdf) - 1)
                    actions[agent] = a
                    if learning:
                        traj = open_trajs.setdefault(agent, Trajectory())
                        traj.add(obs[agent], a, logp[row, a], values[row])
        res = env.step(actions)
        total += res.reward
        for agent, traj in open_trajs.items():
            if agent in actions:
                traj.rewards.append(res.reward)
        for agent in res.exited:
            if agent in open_trajs:
                traj = open_trajs.pop(agent)
                traj.dones[-1] = True
                traj.bootstrap_value = 0.0
                done_trajs[mapping[agent]].append(traj)
            mapping.pop(agent, None)
        if res.done:
            for agent, traj in open_trajs.items():
                slot = pool.slots[mapping[agent]]
                traj.bootstrap_value = float(slot.value(res.obs[agent]))
                done_trajs[mapping[agent]].append(traj)
            break
        obs = res.obs
        entered = res.entered
    return EpisodeResult(total, env.sim.travel_time_stats().avg_tt, done_trajs, env.steps)


def _episode_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def collect(env: BottleneckEnv, pool: PolicyPool, learners: Sequence[int], n_episodes: int,
            seed: int, sweep: int, agent: int) -> Tuple[Dict[int, List[Trajectory]], List[float]]:
    """Collect ``n_episodes`` for the given learning slots.

    Episode seeds and the action RNG depend only on ``(seed, sweep, agent)``.
    """
    rng = np.random.default_rng([seed, sweep, agent, 0])
    batches: Dict[int, List[Trajectory]] = {i: [] for i in learners}
    rewards = []
    for e in range(n_episodes):
        ep_seed = _episode_seed(seed, sweep, agent, e)
        try:
            res = run_episode(env, pool, ep_seed, rng, learners)
        except (FloatingPointError, ArithmeticError) as exc:
            log.warning("discarding episode %d of sweep %d agent %d: %s", e, sweep, agent, exc)
            continue
        for i in learners:
            batches[i].extend(res.trajectories[i])
        rewards.append(res.reward)
    return batches, rewards


def a2pi_sweep(pool: PolicyPool, env: BottleneckEnv, cfg: PpoConfig, schedule: SweepSchedule,
               seed: int, on_agent: Optional[Callable[[int, int, PolicyPool, dict], None]] = None) -> PolicyPool:
    """One pass of agent-by-agent improvement; increments ``pool.iteration``."""
    k = pool.iteration + 1
    for i in schedule.order:
        frozen = {j: pool.slots[j].digest() for j in range(len(pool.slots)) if j != i}
        batches, rewards = collect(env, pool, [i], schedule.episodes_per_update, seed, k, i)
        stats = []
        if any(len(t) for t in batches[i]):
            stats = ppo_update(pool.slots[i], batches[i], cfg, np.random.default_rng([seed, k, i, 1]))
        for j, d in frozen.items():
            if pool.slots[j].digest() != d:
                raise AssertionError(f"slot {j} changed while slot {i} was updated")
        record = {"sweep": k, "agent": i, "episode_rewards": rewards, "ppo": stats}
        pool.history.append({"sweep": k, "agent": i, "digest": pool.slots[i].digest(),
                             "mean_episode_reward": float(np.mean(rewards)) if rewards else None})
        if on_agent is not None:
            on_agent(k, i, pool, record)
    pool.iteration = k
    return pool


def simultaneous_sweep(pool: PolicyPool, env: BottleneckEnv, cfg: PpoConfig, schedule: SweepSchedule,
                       seed: int, on_agent: Optional[Callable[[int, int, PolicyPool, dict], None]] = None) -> PolicyPool:
    """Ablation: every slot learns from the same jointly collected episodes,
    all starting from the policies of the previous sweep."""
    k = pool.iteration + 1
    learners = list(schedule.order)
    batches, rewards = collect(env, pool, learners, schedule.episodes_per_update, seed, k, 0)
    for i in learners:
        stats = []
        if any(len(t) for t in batches[i]):
            stats = ppo_update(pool.slots[i], batches[i], cfg, np.random.default_rng([seed, k, i, 1]))
        pool.history.append({"sweep": k, "agent": i, "digest": pool.slots[i].digest(),
                             "mean_episode_reward": float(np.mean(rewards)) if rewards else None})
        if on_agent is not None:
            on_agent(k, i, pool, {"sweep": k, "agent": i, "episode_rewards": rewards, "ppo": stats})
    pool.iteration = k
    return pool


@dataclass
class Evaluation:
    rewards: List[float]
    avg_tts: List[float]

    @property
    def median_reward(self) -> float:
        return float(np.median(self.rewards))

    @property
    def median_tt(self) -> float:
        return float(np.median(self.avg_tts))


def evaluate(env: BottleneckEnv, pool: Optional[PolicyPool], seeds: Sequence[int],
             greedy: bool = True) -> Evaluation:
    """Frozen-policy (or uncontrolled, ``pool=None``) episodes on given seeds."""
    rewards, tts = [], []
    for s in seeds:
        rng = np.random.default_rng([s, 0xE7A1])
        res = run_episode(env, pool, s, rng, (), greedy=greedy)
        rewards.append(res.reward)
        tts.append(res.avg_tt)
    return Evaluation(rewards, tts)


def train(env: BottleneckEnv, pool: PolicyPool, cfg: PpoConfig, schedule: SweepSchedule,
          seed: int, eval_seeds: Sequence[int], greedy_eval: bool = True,
          algorithm: str = "marollout", checkpoint_dir=None,
          on_agent: Optional[Callable[[int, int, PolicyPool, dict], None]] = None):
    """Run ``schedule.sweeps`` sweeps, evaluating after every agent update.

    Returns ``(pool, curve)`` where ``curve`` rows are
    ``{sweep, agent, eval_reward, eval_avg_tt}``; the first row (sweep 0)
    evaluates the initial pool.  With ``checkpoint_dir`` the pool is saved
    after every sweep; a non-finite update aborts with the last completed
    sweep's checkpoint left in place.
    """
    sweep_fn = a2pi_sweep if algorithm == "marollout" else simultaneous_sweep
    curve = []

    def record(k, agent):
        ev = evaluate(env, pool, eval_seeds, greedy_eval)
        curve.append({"sweep": k, "agent": agent, "eval_reward": ev.median_reward,
                      "eval_avg_tt": ev.median_tt})

    record(0, "")

    def after_agent(k, i, p, rec):
        if on_agent is not None:
            on_agent(k, i, p, rec)
        if algorithm == "marollout":
            record(k, i)

    for _ in range(schedule.sweeps):
        sweep_fn(pool, env, cfg, schedule, seed, after_agent)
        if algorithm != "marollout":
            record(pool.iteration, "all")
        if checkpoint_dir is not None:
            pool.save(Path(checkpoint_dir) / f"sweep_{pool.iteration}")
    return pool, curve

"""Dec-POMDP view of the bottleneck simulator.

Every AV inside the coordination zone is an agent.  Agents observe their own
speed, their distance to the exit and the per-edge, per-lane vehicle counts
of the coordination zone; they pick one of a fixed set of accelerations and
all share one reward per step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .traffic import AV_MAX_SPEED, NUM_LANES, Simulation, Vehicle


@dataclass(frozen=True)
class DecPomdpConfig:
    gamma: float = 0.9
    horizon: int = 700
    eta_min: float = -5.0
    eta_max: float = 2.5
    action_bins: int = 11
    time_penalty: float = 1.0
    v_ref: float = 10.0
    count_cap: float = 50.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not self.eta_min < self.eta_max:
            raise ValueError("eta_min must be < eta_max")
        if self.action_bins < 2:
            raise ValueError("action_bins must be >= 2")
        if self.time_penalty < 0:
            raise ValueError("time_penalty must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1 step")


class ActionSpec:
    """Accelerations linearly spaced over ``[eta_min, eta_max]``."""

    def __init__(self, eta_min: float = -5.0, eta_max: float = 2.5, bins: int = 11):
        self.bins = np.linspace(eta_min, eta_max, bins)

    def __len__(self):
        return len(self.bins)

    def clamp_action(self, bin_index: int) -> float:
        if not (isinstance(bin_index, (int, np.integer)) and 0 <= bin_index < len(self.bins)):
            raise IndexError(f"action bin {bin_index!r} outside [0, {len(self.bins)})")
        return float(self.bins[bin_index])


@dataclass
class StepResult:
    obs: Dict[int, np.ndarray]
    reward: float
    done: bool
    entered: List[int] = field(default_factory=list)
    exited: List[int] = field(default_factory=list)


def observation_dim(num_edges: int) -> int:
    return 2 + num_edges * NUM_LANES


def build_observation(av: Vehicle, sim: Simulation, cfg: DecPomdpConfig,
                      counts: Optional[np.ndarray] = None) -> np.ndarray:
    """``[v / v_max_AV, d / zone_length, counts / cap ...]`` for one AV.

    ``counts`` may be passed in to share one count matrix between agents.
    """
    net = sim.network
    if not net.in_coordination_zone(av.position):
        raise ValueError(f"vehicle {av.id} is outside the coordination zone")
    if counts is None:
        counts = sim.count_vehicles()
    zone = np.minimum(counts[1:].ravel() / cfg.count_cap, 1.0)
    head = [av.speed / AV_MAX_SPEED,
            (net.exit_position - av.position) / net.coordination_zone_length]
    return np.concatenate([head, zone])


def reward(sim: Simulation, cfg: DecPomdpConfig) -> float:
    """Mean speed of every vehicle in the coordination zone over ``v_ref``,
    minus the per-step time penalty.  An empty zone counts as speed 0."""
    start = sim.network.coordination_start
    speeds = [v.speed for lane in sim.lanes for v in lane if v.position >= start]
    v_b = float(np.mean(speeds)) if speeds else 0.0
    return v_b / cfg.v_ref - cfg.time_penalty


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


class BottleneckEnv:
    """Episode wrapper around :class:`Simulation`.

    Parameters
    ----------
    sim_factory : callable
        ``sim_factory(seed)`` returns a fresh simulation for one episode.
    cfg : DecPomdpConfig
    """

    def __init__(self, sim_factory: Callable[[int], Simulation], cfg: DecPomdpConfig):
        self.sim_factory = sim_factory
        self.cfg = cfg
        self.actions = ActionSpec(cfg.eta_min, cfg.eta_max, cfg.action_bins)
        self.sim: Optional[Simulation] = None
        self.controlled: List[int] = []
        self.steps = 0
        self.log: List[dict] = []

    def reset(self, seed: int, control: bool = True) -> Dict[int, np.ndarray]:
        """Start an episode.  With ``control=False`` no AV is ever handed to
        an agent, so every vehicle follows the car-following model."""
        self.sim = self.sim_factory(seed)
        self.control = control
        self.steps = 0
        self.log = []
        self._released = set()
        self.controlled = self._zone_agents()
        return self._observe()

    def _zone_agents(self) -> List[int]:
        return [v.id for v in self.sim.coordination_avs()] if self.control else []

    def _observe(self) -> Dict[int, np.ndarray]:
        if not self.controlled:
            return {}
        counts = self.sim.count_vehicles()
        avs = {v.id: v for v in self.sim.coordination_avs()}
        return {i: build_observation(avs[i], self.sim, self.cfg, counts) for i in self.controlled}

    def step(self, actions: Dict[int, int]) -> StepResult:
        if self.sim is None:
            raise RuntimeError("call reset() before step()")
        missing = sorted(set(self.controlled) - set(actions))
        extra = sorted(set(actions) - set(self.controlled))
        if missing or extra:
            raise KeyError(f"action set mismatch: missing={missing} extra={extra}")
        accels = {i: self.actions.clamp_action(a) for i, a in actions.items()}
        self.sim.step(accels)
        self.steps += 1
        before = self.controlled
        now = self._zone_agents()
        entered = [i for i in now if i not in before]
        exited = [i for i in before if i not in now]
        assert not self._released.intersection(entered)
        self._released.update(exited)
        self.controlled = now
        r = reward(self.sim, self.cfg)
        start = self.sim.network.coordination_start
        self.log.append({"t": self.sim.t, "reward": r, "controlled": len(now),
                         "zone_vehicles": sum(1 for v in self.sim.vehicles if v.position >= start)})
        return StepResult(self._observe(), r, self.steps >= self.cfg.horizon, entered, exited)

    def write_log(self, path) -> None:
        write_episode_log(self.log, path)


def write_episode_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "reward", "controlled", "zone_vehicles"])
        w.writeheader()
        for row in rows:
            w.writerow({**row, "reward": repr(row["reward"])})

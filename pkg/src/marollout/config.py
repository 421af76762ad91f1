"""Scenario configuration: one object describes a whole experiment.

Configs round-trip through YAML.  Unknown keys are rejected so typos do not
silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .env import BottleneckEnv, DecPomdpConfig
from .ppo import PpoConfig
from .traffic import IdmParams, InflowProcess, RoadNetwork, Simulation


@dataclass(frozen=True)
class NetworkSpec:
    free_zone_length: float = 400.0
    coordination_zone_length: float = 1000.0
    merge_point: float = 1200.0
    num_edges: int = 5
    merge_window: float = 100.0

    def build(self) -> RoadNetwork:
        return RoadNetwork(**dataclasses.asdict(self))


@dataclass(frozen=True)
class InflowSpec:
    """``constant``: ``rate`` veh/h throughout.  ``random``: a new rate drawn
    uniformly from ``[low, high]`` every ``period`` seconds, per episode seed."""

    kind: str = "constant"
    rate: float = 2400.0
    low: float = 0.0
    high: float = 4000.0
    period: float = 300.0

    def __post_init__(self):
        if self.kind not in ("constant", "random"):
            raise ValueError(f"unknown inflow kind {self.kind!r}")
        if self.rate < 0 or self.low < 0 or self.high < self.low or self.period <= 0:
            raise ValueError("invalid inflow parameters")

    def schedule(self, horizon: float, seed: int):
        if self.kind == "constant":
            return [(0.0, float(self.rate))]
        rng = np.random.default_rng([seed, 0x5EED])
        n = int(np.ceil(horizon / self.period))
        return [(k * self.period, float(r)) for k, r in enumerate(rng.uniform(self.low, self.high, n))]


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "fixed"
    n_agents: int = 6
    sweeps: int = 2
    episodes_per_update: int = 4
    eval_seeds: List[int] = field(default_factory=lambda: [10_001, 10_002, 10_003, 10_004, 10_005])
    greedy_eval: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "shared"):
            raise ValueError("mode must be 'fixed' or 'shared'")
        if self.n_agents < 1 or self.sweeps < 0 or self.episodes_per_update < 1:
            raise ValueError("invalid training sizes")
        if not self.eval_seeds:
            raise ValueError("need at least one evaluation seed")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "congestion"
    horizon: float = 700.0
    dt: float = 1.0
    seed: int = 0
    penetration: float = 0.0
    fixed_av_count: Optional[int] = 6
    warmup: float = 120.0
    network: NetworkSpec = NetworkSpec()
    idm: IdmParams = IdmParams()
    inflow: InflowSpec = InflowSpec()
    env: DecPomdpConfig = DecPomdpConfig()
    ppo: PpoConfig = PpoConfig()
    training: TrainingConfig = TrainingConfig()

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def dec_pomdp(self) -> DecPomdpConfig:
        return dataclasses.replace(self.env, horizon=self.steps)

    def ppo_config(self) -> PpoConfig:
        return dataclasses.replace(self.ppo, gamma=self.env.gamma)

    def make_sim(self, seed: int, penetration: Optional[float] = None,
                 rate: Optional[float] = None) -> Simulation:
        inflow = self.inflow if rate is None else dataclasses.replace(self.inflow, kind="constant", rate=rate)
        proc = InflowProcess(schedule=inflow.schedule(self.horizon, seed),
                             penetration=self.penetration if penetration is None else penetration,
                             rng_seed=seed,
                             fixed_av_count=self.fixed_av_count if penetration is None else None,
                             warmup=self.warmup)
        return Simulation(self.network.build(), proc, self.idm, dt=self.dt)

    def make_env(self, penetration: Optional[float] = None, rate: Optional[float] = None) -> BottleneckEnv:
        return BottleneckEnv(lambda s: self.make_sim(s, penetration, rate), self.dec_pomdp())

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ppo"]["hidden"] = list(d["ppo"]["hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        nested = {"network": NetworkSpec, "idm": IdmParams, "inflow": InflowSpec,
                  "env": DecPomdpConfig, "ppo": PpoConfig, "training": TrainingConfig}
        base = cls()
        for key, typ in nested.items():
            if key in d:
                sub = dict(d[key])
                _reject_unknown(typ, sub, key)
                if key == "ppo" and "hidden" in sub:
                    sub["hidden"] = tuple(sub["hidden"])
                d[key] = dataclasses.replace(getattr(base, key), **sub)
        _reject_unknown(cls, d, "scenario")
        return dataclasses.replace(base, **d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _reject_unknown(typ, d: dict, where: str) -> None:
    known = {f.name for f in dataclasses.fields(typ) if f.init}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def builtin(name: str) -> ScenarioConfig:
    """Scenarios used by the experiments.

    ``congestion``: 700 s at 2400 veh/h with six designated AVs.
    ``dynamic``: 7200 s of random inflow in [0, 4000] veh/h, 10 % AVs.
    ``dynamic_smoke``: the same process cut to 1800 s.

    The dynamic scenarios train one shared policy for 10 sweeps, since a
    single-slot sweep is just one PPO update.
    """
    if name == "congestion":
        return ScenarioConfig()
    if name in ("dynamic", "dynamic_smoke"):
        return ScenarioConfig(
            name=name, horizon=7200.0 if name == "dynamic" else 1800.0,
            penetration=0.10, fixed_av_count=None, warmup=0.0,
            inflow=InflowSpec(kind="random"),
            training=TrainingConfig(mode="shared", n_agents=1, sweeps=10))
    raise KeyError(f"unknown scenario {name!r}; expected congestion, dynamic or dynamic_smoke")


def resolve(scenario: str) -> ScenarioConfig:
    """Built-in name or path to a YAML file."""
    if Path(scenario).suffix in (".yaml", ".yml") or Path(scenario).exists():
        return ScenarioConfig.load(scenario)
    return builtin(scenario)

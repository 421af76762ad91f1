"""Microscopic simulation of a 3-to-2 lane-drop highway segment.

The road is a single straight route of ``free_zone_length +
coordination_zone_length`` metres.  Lanes are indexed from 0; lane 2 is the
dropped lane and ends at ``merge_point``, where its vehicles must have moved
into lane 1.  All uncontrolled vehicles follow the Intelligent Driver Model;
AVs inside the coordination zone may be given external accelerations, which
pass through a braking-feasibility safety override.

Time advances in fixed steps with semi-implicit Euler integration (speed
first, then position).
"""
from __future__ import annotations

import bisect
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

HDV_MAX_SPEED = 10.0
AV_MAX_SPEED = 12.0
NUM_LANES = 3
DROPPED_LANE = 2
TARGET_LANE = 1

# smallest bumper-to-bumper gap the integrator ever leaves behind a leader
_BACKSTOP_GAP = 0.1


class CollisionStateError(ValueError):
    """Raised when a car-following query is made with a non-positive gap."""


class VehicleKind(str, Enum):
    HDV = "HDV"
    AV = "AV"


@dataclass(frozen=True)
class Edge:
    index: int
    start_pos: float
    end_pos: float
    lane_count: int

    def __post_init__(self):
        if not self.start_pos < self.end_pos:
            raise ValueError(f"edge {self.index}: start_pos must be < end_pos")
        if self.lane_count not in (2, 3):
            raise ValueError(f"edge {self.index}: lane_count must be 2 or 3")


@dataclass(frozen=True)
class RoadNetwork:
    """Geometry of the studied segment.

    ``edges[0]`` is the free zone; ``edges[1:]`` partition the coordination
    zone into ``num_edges`` equal pieces.  Row ``e`` of a count matrix
    refers to ``edges[e]``.
    """

    free_zone_length: float = 400.0
    coordination_zone_length: float = 1000.0
    merge_point: float = 1200.0
    num_edges: int = 5
    merge_window: float = 100.0
    edges: Tuple[Edge, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.free_zone_length <= 0 or self.coordination_zone_length <= 0:
            raise ValueError("zone lengths must be positive")
        if self.num_edges < 1:
            raise ValueError("num_edges must be >= 1")
        zone_start = self.free_zone_length
        if not zone_start < self.merge_point < self.exit_position:
            raise ValueError("merge_point must lie strictly inside the coordination zone")
        if self.merge_window <= 0:
            raise ValueError("merge_window must be positive")
        width = self.coordination_zone_length / self.num_edges
        bounds = [0.0] + [zone_start + k * width for k in range(self.num_edges + 1)]
        bounds[-1] = self.exit_position
        edges = []
        for i in range(len(bounds) - 1):
            lo, hi = bounds[i], bounds[i + 1]
            if lo < self.merge_point < hi:
                raise ValueError("merge_point must coincide with an edge boundary")
            lanes = 3 if hi <= self.merge_point + 1e-9 else 2
            edges.append(Edge(i, lo, hi, lanes))
        object.__setattr__(self, "edges", tuple(edges))

    @property
    def coordination_start(self) -> float:
        return self.free_zone_length

    @property
    def exit_position(self) -> float:
        return self.free_zone_length + self.coordination_zone_length

    @property
    def total_length(self) -> float:
        return self.edges[-1].end_pos - self.edges[0].start_pos

    @property
    def merge_window_start(self) -> float:
        return self.merge_point - self.merge_window

    def edge_index(self, position: float) -> int:
        """Index of the edge containing ``position`` (half-open intervals)."""
        if position < 0 or position >= self.exit_position:
            raise ValueError(f"position {position} is off the road")
        starts = [e.start_pos for e in self.edges]
        return bisect.bisect_right(starts, position) - 1

    def lane_count_at(self, position: float) -> int:
        return 3 if position < self.merge_point else 2

    def in_coordination_zone(self, position: float) -> bool:
        return self.coordination_start <= position < self.exit_position


@dataclass(frozen=True)
class IdmParams:
    v0: float = HDV_MAX_SPEED
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 2.5
    comfortable_decel: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "time_headway", "min_gap", "max_accel", "comfortable_decel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be positive")
        if self.delta < 1:
            raise ValueError("IdmParams.delta must be >= 1")

    def with_desired_speed(self, v0: float) -> "IdmParams":
        return IdmParams(v0, self.time_headway, self.min_gap, self.max_accel,
                         self.comfortable_decel, self.delta)


@dataclass
class Vehicle:
    id: int
    kind: VehicleKind
    position: float
    lane: int
    speed: float
    v_max: float
    entry_time: float
    accel: float = 0.0
    exit_time: Optional[float] = None
    length: float = 5.0

    @property
    def is_av(self) -> bool:
        return self.kind is VehicleKind.AV


@dataclass
class InflowProcess:
    """Poisson arrival process at the upstream end of the road.

    ``schedule`` is a piecewise-constant demand: a sorted list of
    ``(start_time, veh_per_hour)`` pairs; the first pair must start at 0.
    With ``fixed_av_count`` set, penetration is ignored and exactly that many
    arrivals at or after ``warmup`` become AVs, all others HDVs.
    """

    schedule: List[Tuple[float, float]]
    penetration: float = 0.0
    rng_seed: int = 0
    fixed_av_count: Optional[int] = None
    warmup: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must be in [0, 1]")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ValueError("schedule must start at t=0")
        times = [t for t, _ in self.schedule]
        if times != sorted(times):
            raise ValueError("schedule times must be sorted")
        if any(r < 0 for _, r in self.schedule):
            raise ValueError("inflow rate must be >= 0")
        if self.fixed_av_count is not None and self.fixed_av_count < 0:
            raise ValueError("fixed_av_count must be >= 0")

    @classmethod
    def constant(cls, rate: float, **kwargs) -> "InflowProcess":
        return cls(schedule=[(0.0, float(rate))], **kwargs)

    def rate_at(self, t: float) -> float:
        idx = bisect.bisect_right([s for s, _ in self.schedule], t) - 1
        return self.schedule[max(idx, 0)][1]


def idm_accel(ego_speed: float, leader_gap: float, leader_speed: float,
              params: IdmParams) -> float:
    """IDM acceleration.

    Pass ``leader_gap=math.inf`` when there is no leader.  A finite gap that
    is not strictly positive means the caller let two vehicles overlap.
    """
    free = 1.0 - (ego_speed / params.v0) ** params.delta
    if math.isinf(leader_gap):
        return params.max_accel * free
    if not leader_gap > 0:
        raise CollisionStateError(f"non-positive gap {leader_gap} with a leader present")
    dv = ego_speed - leader_speed
    s_star = params.min_gap + max(
        0.0,
        ego_speed * params.time_headway
        + ego_speed * dv / (2.0 * math.sqrt(params.max_accel * params.comfortable_decel)))
    return params.max_accel * (free - (s_star / leader_gap) ** 2)


def safe_speed(gap_after_leader_moves: float, leader_next_speed: float,
               max_decel: float, dt: float, min_gap: float) -> float:
    """Largest next-step speed from which the follower can still stop.

    Assumes the leader may brake at ``max_decel`` from ``leader_next_speed``.
    ``gap_after_leader_moves`` is the bumper gap after the leader's update
    but before the follower moves.
    """
    room = gap_after_leader_moves - min_gap
    if room <= 0:
        return 0.0
    budget = room + leader_next_speed ** 2 / (2.0 * max_decel)
    v = max_decel * (-dt + math.sqrt(dt * dt + 2.0 * budget / max_decel))
    return max(0.0, min(v, room / dt))


def spawn_vehicles(proc: InflowProcess, t: float, dt: float, rng: np.random.Generator,
                   next_id: int, av_spawned: int) -> List[Vehicle]:
    """Draw the arrivals of one step as not-yet-placed vehicles.

    Arrivals are Poisson with mean ``rate * dt / 3600``.  Returned vehicles
    carry ``entry_time = t + dt`` and lane ``-1``; placement on the road is
    the simulator's job (it may defer them in its queue).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rate = proc.rate_at(t)
    n = int(rng.poisson(rate * dt / 3600.0)) if rate > 0 else 0
    out = []
    for k in range(n):
        if proc.fixed_av_count is not None:
            is_av = t >= proc.warmup and av_spawned < proc.fixed_av_count
        else:
            is_av = bool(rng.random() < proc.penetration)
        if is_av:
            av_spawned += 1
        kind = VehicleKind.AV if is_av else VehicleKind.HDV
        out.append(Vehicle(id=next_id + k, kind=kind, position=0.0, lane=-1, speed=0.0,
                           v_max=AV_MAX_SPEED if is_av else HDV_MAX_SPEED,
                           entry_time=t + dt))
    return out


def merge_gap_ok(ego: Vehicle, leader: Optional[Vehicle], follower: Optional[Vehicle],
                 idm: IdmParams) -> bool:
    """Gap acceptance for a move into the target lane.

    Both the ego (towards its new leader) and the new follower (towards the
    ego) need at least ``s0 + v * T_h`` of bumper gap.
    """
    if leader is not None:
        gap = leader.position - leader.length - ego.position
        if gap < idm.min_gap + ego.speed * idm.time_headway:
            return False
    if follower is not None:
        gap = ego.position - ego.length - follower.position
        if gap < idm.min_gap + follower.speed * idm.time_headway:
            return False
    return True


def merge_rule(ego: Vehicle, target_lane: Sequence[Vehicle], network: RoadNetwork,
               idm: IdmParams) -> Optional[int]:
    """Decide whether a dropped-lane vehicle merges now.

    ``target_lane`` is ordered front to back.  Returns the insertion index
    into ``target_lane`` when the merge happens this step, else ``None``.
    Merging is only allowed inside ``[merge_point - merge_window,
    merge_point]``; a vehicle that finds no gap keeps approaching the merge
    point, where it stops and waits.
    """
    if ego.lane != DROPPED_LANE:
        raise ValueError("merge_rule applies to the dropped lane only")
    if not network.merge_window_start <= ego.position <= network.merge_point:
        return None
    # first vehicle strictly behind ego position in front-to-back order
    idx = 0
    while idx < len(target_lane) and target_lane[idx].position >= ego.position:
        idx += 1
    leader = target_lane[idx - 1] if idx > 0 else None
    follower = target_lane[idx] if idx < len(target_lane) else None
    return idx if merge_gap_ok(ego, leader, follower, idm) else None


@dataclass
class TravelTimeStats:
    avg_tt: float
    count: int


class Simulation:
    """One independent simulation instance.

    Parameters
    ----------
    network : RoadNetwork
    inflow : InflowProcess
    idm : IdmParams
        Car-following parameters; each vehicle uses them with ``v0`` set to
        its own maximum speed.
    dt : float
        Step length in seconds.
    max_queue : int
        Bound on arrivals waiting for an entry gap; overflow is counted in
        ``rejected``.
    av_max_decel : float
        Braking capability assumed by the safety override on controlled AVs.
    """

    def __init__(self, network: RoadNetwork, inflow: InflowProcess,
                 idm: IdmParams = IdmParams(), dt: float = 1.0,
                 max_queue: int = 10_000, av_max_decel: float = 5.0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.network = network
        self.inflow = inflow
        self.idm = idm
        self.dt = float(dt)
        self.max_queue = max_queue
        self.av_max_decel = av_max_decel
        self.rng = np.random.default_rng(inflow.rng_seed)
        self._idm_by_vmax = {v: idm.with_desired_speed(v) for v in (HDV_MAX_SPEED, AV_MAX_SPEED)}
        self.t = 0.0
        self.lanes: List[List[Vehicle]] = [[] for _ in range(NUM_LANES)]
        self.queue: deque = deque()
        self.exited: List[Vehicle] = []
        self.spawned = 0
        self.rejected = 0
        self.av_spawned = 0
        self._next_id = 0

    # -- inspection -----------------------------------------------------
    @property
    def vehicles(self) -> List[Vehicle]:
        return [v for lane in self.lanes for v in lane]

    def vehicle_count(self) -> int:
        return sum(len(lane) for lane in self.lanes)

    def coordination_avs(self) -> List[Vehicle]:
        """AVs currently inside the coordination zone, by ascending id."""
        start = self.network.coordination_start
        return sorted((v for lane in self.lanes for v in lane
                       if v.is_av and v.position >= start), key=lambda v: v.id)

    def count_vehicles(self) -> np.ndarray:
        """Vehicle counts per (edge, lane); row 0 is the free zone."""
        n = np.zeros((len(self.network.edges), NUM_LANES), dtype=np.int64)
        starts = [e.start_pos for e in self.network.edges]
        for lane_idx, lane in enumerate(self.lanes):
            for v in lane:
                n[bisect.bisect_right(starts, v.position) - 1, lane_idx] += 1
        return n

    def travel_time_stats(self, include_unfinished: bool = True) -> TravelTimeStats:
        """Average travel time.

        Vehicles still on the road, or still waiting to enter, are charged
        ``t - entry_time`` so that holding traffic back is never rewarded.
        """
        times = [v.exit_time - v.entry_time for v in self.exited]
        if include_unfinished:
            times += [self.t - v.entry_time for v in self.vehicles]
            times += [self.t - v.entry_time for v in self.queue]
        if not times:
            return TravelTimeStats(0.0, 0)
        return TravelTimeStats(float(np.mean(times)), len(times))

    def snapshot(self) -> List[dict]:
        return [{"t": self.t, "id": v.id, "kind": v.kind.value, "lane": v.lane,
                 "position": v.position, "speed": v.speed}
                for lane in self.lanes for v in lane]

    def check_invariants(self) -> None:
        """Raise AssertionError if any physical invariant is broken."""
        for lane in self.lanes:
            for lead, foll in zip(lane, lane[1:]):
                assert foll.position + foll.length <= lead.position + 1e-9, (lead.id, foll.id)
            for v in lane:
                assert 0.0 <= v.speed <= v.v_max + 1e-12, v.id
        for v in self.lanes[DROPPED_LANE]:
            assert v.position <= self.network.merge_point + 1e-9, v.id
        on_road = self.vehicle_count()
        assert self.spawned == on_road + len(self.exited) + len(self.queue) + self.rejected

    # -- dynamics -------------------------------------------------------
    def step(self, controlled_accels: Optional[Dict[int, float]] = None) -> List[Vehicle]:
        """Advance one step; returns the vehicles that exited during it."""
        controlled_accels = controlled_accels or {}
        dt = self.dt
        self._merge()
        exited = self._integrate(controlled_accels, dt)
        self.t += dt
        for v in exited:
            v.exit_time = self.t
        self.exited.extend(exited)
        self._spawn(dt)
        return exited

    def _merge(self) -> None:
        dropped = self.lanes[DROPPED_LANE]
        target = self.lanes[TARGET_LANE]
        kept = []
        for v in dropped:
            idx = merge_rule(v, target, self.network, self.idm)
            if idx is None:
                kept.append(v)
            else:
                v.lane = TARGET_LANE
                target.insert(idx, v)
        self.lanes[DROPPED_LANE] = kept

    def _integrate(self, controlled: Dict[int, float], dt: float) -> List[Vehicle]:
        exit_pos = self.network.exit_position
        merge_point = self.network.merge_point
        exited = []
        for lane_idx, lane in enumerate(self.lanes):
            lead: Optional[Vehicle] = None
            lead_old_pos = lead_new_pos = 0.0
            for v in lane:
                if lead is not None:
                    gap_now = lead_old_pos - lead.length - v.position
                    gap_after = lead_new_pos - lead.length - v.position
                    lead_speed = lead.speed
                elif lane_idx == DROPPED_LANE:
                    # end of the dropped lane acts as a stopped obstacle
                    gap_now = gap_after = merge_point - v.position
                    lead_speed = 0.0
                else:
                    gap_now = gap_after = math.inf
                    lead_speed = 0.0
                if v.id in controlled:
                    a = float(controlled[v.id])
                    if math.isfinite(gap_after):
                        v_safe = safe_speed(gap_after, lead_speed, self.av_max_decel, dt,
                                            self.idm.min_gap)
                        a = min(a, (v_safe - v.speed) / dt)
                else:
                    gap_q = gap_now if gap_now > 0 else _BACKSTOP_GAP * 0.5
                    a = idm_accel(v.speed, gap_q, lead_speed, self._idm_by_vmax[v.v_max])
                new_speed = min(max(v.speed + a * dt, 0.0), v.v_max)
                if math.isfinite(gap_after):
                    new_speed = min(new_speed, max(0.0, (gap_after - _BACKSTOP_GAP) / dt))
                old_pos = v.position
                v.accel = (new_speed - v.speed) / dt
                v.speed = new_speed
                v.position = old_pos + new_speed * dt
                lead, lead_old_pos, lead_new_pos = v, old_pos, v.position
            while lane and lane[0].position >= exit_pos:
                exited.append(lane.pop(0))
        return exited

    def _spawn(self, dt: float) -> None:
        # arrivals are stamped with the end of the step that just finished
        arrivals = spawn_vehicles(self.inflow, self.t - dt, dt, self.rng,
                                  self._next_id, self.av_spawned)
        self._next_id += len(arrivals)
        self.spawned += len(arrivals)
        for v in arrivals:
            if v.is_av:
                self.av_spawned += 1
            if len(self.queue) >= self.max_queue:
                self.rejected += 1
            else:
                self.queue.append(v)
        while self.queue:
            v = self.queue[0]
            options = []
            for lane_idx, lane in enumerate(self.lanes):
                speed = v.v_max
                if lane:
                    last = lane[-1]
                    rear = last.position - last.length
                    speed = min(speed, last.speed)
                    if rear < self.idm.min_gap + speed * self.idm.time_headway:
                        continue
                options.append((lane_idx, speed))
            if not options:
                break
            lane_idx, speed = options[int(self.rng.integers(len(options)))]
            self.queue.popleft()
            v.lane, v.speed, v.position = lane_idx, speed, 0.0
            self.lanes[lane_idx].append(v)

    def run(self, steps: int, controller=None) -> None:
        """Step ``steps`` times; ``controller(sim)`` may supply AV accels."""
        for _ in range(steps):
            self.step(controller(self) if controller else None)


def write_snapshots(rows: Iterable[dict], path) -> None:
    """Line-delimited JSON dump of vehicle states."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

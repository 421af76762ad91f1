"""Exact agent-by-agent policy iteration on small tabular two-agent problems.

Used to check, without sampling noise, that improving one agent at a time
against the others' current policies never lowers the joint value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

_TIE_TOL = 1e-12


@dataclass
class ExactDecMdp:
    """``transitions[s, a1, a2, s']`` and ``rewards[s, a1, a2]``."""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.transitions.ndim != 4:
            raise ValueError("transitions must be indexed [s, a1, a2, s']")
        n_s = self.transitions.shape[0]
        if self.transitions.shape[-1] != n_s:
            raise ValueError("transition tensor is not square in the state axes")
        if self.rewards.shape != self.transitions.shape[:3]:
            raise ValueError("rewards must be indexed [s, a1, a2]")
        if not np.allclose(self.transitions.sum(-1), 1.0, atol=1e-12) or (self.transitions < 0).any():
            raise ValueError("transition rows must be probability vectors")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("exact evaluation needs 0 <= gamma < 1")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> Tuple[int, int]:
        return self.transitions.shape[1], self.transitions.shape[2]

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_actions: Tuple[int, int],
               gamma: float) -> "ExactDecMdp":
        p = rng.random((n_states, *n_actions, n_states)) ** 3
        p /= p.sum(-1, keepdims=True)
        r = rng.normal(size=(n_states, *n_actions))
        return cls(p, r, gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    pi = rng.random((n_states, n_actions)) + 1e-3
    return pi / pi.sum(1, keepdims=True)


def joint_model(mdp: ExactDecMdp, policies: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """State-to-state matrix and expected reward under a joint tabular policy."""
    pi1, pi2 = policies
    w = pi1[:, :, None] * pi2[:, None, :]
    p = np.einsum("sab,sabt->st", w, mdp.transitions)
    r = np.einsum("sab,sab->s", w, mdp.rewards)
    return p, r


def exact_policy_eval(mdp: ExactDecMdp, policies: Sequence[np.ndarray]) -> np.ndarray:
    """Solve ``(I - gamma P_pi) J = r_pi``."""
    p, r = joint_model(mdp, policies)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p, r)


def agent_q(mdp: ExactDecMdp, policies: Sequence[np.ndarray], agent: int) -> np.ndarray:
    """Q-values of one agent's actions with the other agent following its policy."""
    j = exact_policy_eval(mdp, policies)
    q_joint = mdp.rewards + mdp.gamma * mdp.transitions @ j
    if agent == 0:
        return np.einsum("sab,sb->sa", q_joint, policies[1])
    return np.einsum("sab,sa->sb", q_joint, policies[0])


def greedy(q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy; ties go to the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    choice = np.argmax(q >= best - _TIE_TOL, axis=1)
    pi = np.zeros_like(q)
    pi[np.arange(len(q)), choice] = 1.0
    return pi


def exact_a2pi_step(mdp: ExactDecMdp, policies: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Agent 1 best-responds to agent 2, then agent 2 to the updated agent 1."""
    staged = [np.array(p, dtype=np.float64) for p in policies]
    for agent in range(len(staged)):
        staged[agent] = greedy(agent_q(mdp, staged, agent))
    return staged


def exact_a2pi(mdp: ExactDecMdp, policies: Sequence[np.ndarray], max_sweeps: int = 1000):
    """Iterate to a fixed point; returns ``(policies, values per sweep)``.

    ``values[0]`` belongs to the starting policy.
    """
    current = [np.array(p, dtype=np.float64) for p in policies]
    values = [exact_policy_eval(mdp, current)]
    for _ in range(max_sweeps):
        nxt = exact_a2pi_step(mdp, current)
        if all(np.array_equal(a, b) for a, b in zip(nxt, current)):
            return current, values
        current = nxt
        values.append(exact_policy_eval(mdp, current))
    raise RuntimeError(f"no fixed point within {max_sweeps} sweeps")


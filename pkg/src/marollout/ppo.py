"""Clipped-surrogate PPO for one categorical policy slot."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .neural import AdamState, Mlp, adam_step, load_arrays, log_softmax, sample_categorical, save_arrays


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    gamma: float = 0.9
    lr: float = 1e-4
    hidden: Tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")


@dataclass
class Trajectory:
    """Steps one agent took while it was controlled.

    ``bootstrap_value`` is the critic's estimate for the state after the last
    step; it is 0 when the last step ended the agent's episode.
    """

    obs: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)
    bootstrap_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.actions)

    def add(self, obs, action, log_prob, value):
        self.obs.append(obs)
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.dones.append(False)

    def check(self):
        n = len(self.actions)
        lens = {len(self.obs), len(self.log_probs), len(self.rewards), len(self.values), len(self.dones)}
        if lens != {n}:
            raise ValueError(f"trajectory arrays have unequal lengths: {lens | {n}}")


def compute_advantages(traj: Trajectory, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) advantages and value targets; stored on ``traj`` as well."""
    traj.check()
    r = np.asarray(traj.rewards, dtype=np.float64)
    v = np.asarray(traj.values, dtype=np.float64)
    done = np.asarray(traj.dones, dtype=bool)
    n = len(r)
    adv = np.zeros(n)
    next_value = traj.bootstrap_value
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if done[t] else 1.0
        delta = r[t] + gamma * next_value * nonterminal - v[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = v[t]
    traj.advantages = adv
    traj.returns = adv + v
    return adv, traj.returns


def prob_ratio(new_log_prob, old_log_prob):
    return np.exp(np.asarray(new_log_prob) - np.asarray(old_log_prob))


def clipped_objective(ratio, advantage, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


class PolicySlot:
    """Actor and critic for one agent, each with its own Adam state."""

    def __init__(self, actor: Mlp, critic: Mlp, lr: float = 1e-4):
        self.actor = actor
        self.critic = critic
        self.actor_opt = AdamState.for_params(actor.params, lr=lr)
        self.critic_opt = AdamState.for_params(critic.params, lr=lr)

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, rng: np.random.Generator,
               hidden: Sequence[int] = (64, 64), lr: float = 1e-4) -> "PolicySlot":
        actor = Mlp.initialized([obs_dim, *hidden, n_actions], rng, output_scale=0.01)
        critic = Mlp.initialized([obs_dim, *hidden, 1], rng, output_scale=1.0)
        return cls(actor, critic, lr)

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Tuple[int, float]:
        logits = self.actor(obs)
        if greedy:
            a = int(np.argmax(logits))
            return a, float(log_softmax(logits)[a])
        return sample_categorical(logits, rng)

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self.critic(obs)[..., 0]

    def digest(self) -> str:
        h = hashlib.sha256(self.actor.param_bytes())
        h.update(self.critic.param_bytes())
        return h.hexdigest()

    def copy(self) -> "PolicySlot":
        out = PolicySlot(self.actor.copy(), self.critic.copy(), self.actor_opt.lr)
        for src, dst in ((self.actor_opt, out.actor_opt), (self.critic_opt, out.critic_opt)):
            dst.step = src.step
            dst.m = [x.copy() for x in src.m]
            dst.v = [x.copy() for x in src.v]
        return out

    def save(self, path) -> None:
        named = {}
        for tag, net, opt in (("actor", self.actor, self.actor_opt), ("critic", self.critic, self.critic_opt)):
            for k, p in enumerate(net.params):
                named[f"{tag}/p{k}"] = p
                named[f"{tag}/m{k}"] = opt.m[k]
                named[f"{tag}/v{k}"] = opt.v[k]
        meta = {"actor_sizes": list(self.actor.sizes), "critic_sizes": list(self.critic.sizes),
                "actor_step": self.actor_opt.step, "critic_step": self.critic_opt.step,
                "lr": self.actor_opt.lr, "beta1": self.actor_opt.beta1,
                "beta2": self.actor_opt.beta2, "eps": self.actor_opt.eps}
        save_arrays(path, named, meta)

    @classmethod
    def load(cls, path) -> "PolicySlot":
        arrays, meta = load_arrays(path)
        nets = {}
        for tag in ("actor", "critic"):
            sizes = meta[f"{tag}_sizes"]
            n = 2 * (len(sizes) - 1)
            ps = [arrays[f"{tag}/p{k}"] for k in range(n)]
            nets[tag] = Mlp(sizes, ps[0::2], ps[1::2])
        slot = cls(nets["actor"], nets["critic"], meta["lr"])
        for tag, opt in (("actor", slot.actor_opt), ("critic", slot.critic_opt)):
            n = len(opt.m)
            opt.m = [arrays[f"{tag}/m{k}"] for k in range(n)]
            opt.v = [arrays[f"{tag}/v{k}"] for k in range(n)]
            opt.step = meta[f"{tag}_step"]
            opt.beta1, opt.beta2, opt.eps = meta["beta1"], meta["beta2"], meta["eps"]
        return slot


def ppo_loss_and_grads(slot: PolicySlot, obs: np.ndarray, actions: np.ndarray,
                       old_log_probs: np.ndarray, advantages: np.ndarray,
                       returns: np.ndarray, cfg: PpoConfig):
    """Minibatch loss ``-surrogate + c_v * MSE - c_e * entropy`` and its gradients.

    Returns ``(stats, actor_grads, critic_grads)``.
    """
    b = len(actions)
    logits, a_cache = slot.actor.forward(obs)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    idx = np.arange(b)
    logp = logp_all[idx, actions]
    ratio = prob_ratio(logp, old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    surr = np.minimum(unclipped, clipped)
    ent = -(p * logp_all).sum(axis=1)

    values, c_cache = slot.critic.forward(obs)
    values = values[:, 0]
    v_err = values - returns

    policy_loss = -surr.mean()
    value_loss = float(np.mean(v_err ** 2))
    ent_mean = float(ent.mean())
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent_mean

    # d(surr)/d(logp) is ratio*A where the unclipped branch is the active min
    d_logp = np.where(unclipped <= clipped, ratio * advantages, 0.0)
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    g_logits = -(d_logp[:, None] * (onehot - p))
    g_logits += cfg.entropy_coef * p * (logp_all + ent[:, None])
    g_logits /= b
    actor_grads = slot.actor.backward(a_cache, g_logits)
    g_values = (cfg.value_coef * 2.0 / b) * v_err
    critic_grads = slot.critic.backward(c_cache, g_values[:, None])

    stats = {
        "loss": float(total),
        "policy_loss": float(policy_loss),
        "value_loss": value_loss,
        "entropy": ent_mean,
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean(old_log_probs - logp)),
    }
    return stats, actor_grads, critic_grads


def _flatten(batch: Sequence[Trajectory], cfg: PpoConfig):
    for traj in batch:
        compute_advantages(traj, cfg.gamma, cfg.gae_lambda)
    obs = np.array([o for t in batch for o in t.obs], dtype=np.float64)
    actions = np.array([a for t in batch for a in t.actions], dtype=np.int64)
    old = np.array([lp for t in batch for lp in t.log_probs], dtype=np.float64)
    adv = np.concatenate([t.advantages for t in batch])
    ret = np.concatenate([t.returns for t in batch])
    if len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return obs, actions, old, adv, ret


def ppo_update(slot: PolicySlot, batch: Sequence[Trajectory], cfg: PpoConfig,
               rng: np.random.Generator) -> List[Dict[str, float]]:
    """Run ``cfg.epochs`` shuffled minibatch passes; returns per-epoch stats."""
    batch = [t for t in batch if len(t)]
    if not batch:
        raise ValueError("ppo_update needs at least one non-empty trajectory")
    obs, actions, old, adv, ret = _flatten(batch, cfg)
    n = len(actions)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        acc: Dict[str, float] = {}
        n_mb = 0
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start:start + cfg.minibatch_size]
            stats, ga, gc = ppo_loss_and_grads(slot, obs[mb], actions[mb], old[mb],
                                               adv[mb], ret[mb], cfg)
            if not np.isfinite(stats["loss"]):
                raise FloatingPointError(f"non-finite PPO loss at epoch {epoch}: {stats}")
            slot.actor.apply_update(adam_step(slot.actor.params, ga, slot.actor_opt))
            slot.critic.apply_update(adam_step(slot.critic.params, gc, slot.critic_opt))
            for k, v in stats.items():
                acc[k] = acc.get(k, 0.0) + v
            n_mb += 1
        history.append({"epoch": epoch + 1, "samples": n,
                        **{k: v / n_mb for k, v in acc.items()}})
    return history


def train_single_agent(slot: PolicySlot, collect: Callable[[PolicySlot, int], Tuple[List[Trajectory], List[float]]],
                       cfg: PpoConfig, iterations: int, seed: int,
                       on_iteration: Optional[Callable[[int, PolicySlot], None]] = None) -> PolicySlot:
    """Plain PPO: alternate collection under ``slot`` and updates of ``slot``.

    ``collect(slot, iteration)`` returns ``(trajectories, episode_rewards)``.
    The update RNG for iteration ``k`` is derived from ``(seed, k, 0)``.
    """
    for k in range(1, iterations + 1):
        batch, _ = collect(slot, k)
        rng = np.random.default_rng([seed, k, 0, 1])
        if any(len(t) for t in batch):
            ppo_update(slot, batch, cfg, rng)
        if on_iteration is not None:
            on_iteration(k, slot)
    return slot

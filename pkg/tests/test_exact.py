import numpy as np
import pytest

from marollout.exact import (
    ExactDecMdp,
    agent_q,
    exact_a2pi,
    exact_a2pi_step,
    exact_policy_eval,
    greedy,
    random_policy,
)


def textbook_pi_step(p, r, gamma, pi):
    """Single-agent policy iteration step written with explicit loops."""
    n_s, n_a = r.shape
    p_pi = np.zeros((n_s, n_s))
    r_pi = np.zeros(n_s)
    for s in range(n_s):
        for a in range(n_a):
            p_pi[s] += pi[s, a] * p[s, a]
            r_pi[s] += pi[s, a] * r[s, a]
    v = np.linalg.solve(np.eye(n_s) - gamma * p_pi, r_pi)
    new = np.zeros_like(pi)
    for s in range(n_s):
        q = [r[s, a] + gamma * sum(p[s, a, t] * v[t] for t in range(n_s)) for a in range(n_a)]
        best = max(q)
        new[s, next(a for a in range(n_a) if q[a] >= best - 1e-12)] = 1.0
    return new


def test_validation():
    p = np.full((2, 1, 1, 2), 0.5)
    with pytest.raises(ValueError):
        ExactDecMdp(p, np.zeros((2, 1, 1)), 1.0)
    with pytest.raises(ValueError):
        ExactDecMdp(p * 2, np.zeros((2, 1, 1)), 0.9)
    with pytest.raises(ValueError):
        ExactDecMdp(p, np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        ExactDecMdp(p, np.array([[[np.inf]], [[0.0]]]), 0.9)


def test_gamma_zero_is_expected_immediate_reward():
    rng = np.random.default_rng(0)
    mdp = ExactDecMdp.random(rng, 4, (3, 2), 0.0)
    pis = [random_policy(rng, 4, 3), random_policy(rng, 4, 2)]
    j = exact_policy_eval(mdp, pis)
    expected = [sum(pis[0][s, a] * pis[1][s, b] * mdp.rewards[s, a, b]
                    for a in range(3) for b in range(2)) for s in range(4)]
    assert np.allclose(j, expected, atol=1e-14)


def test_single_state_geometric_series():
    mdp = ExactDecMdp(np.ones((1, 1, 1, 1)), np.ones((1, 1, 1)), 0.9)
    assert exact_policy_eval(mdp, [np.ones((1, 1)), np.ones((1, 1))])[0] == pytest.approx(10.0, abs=1e-12)


def test_policy_eval_matches_monte_carlo():
    rng = np.random.default_rng(1)
    gamma = 0.5
    mdp = ExactDecMdp.random(rng, 4, (2, 3), gamma)
    pis = [random_policy(rng, 4, 2), random_policy(rng, 4, 3)]
    j = exact_policy_eval(mdp, pis)
    n_chains, horizon = 25_000, 40  # 10^6 simulated steps per start state
    sim = np.random.default_rng(2)
    for s0 in range(4):
        state = np.full(n_chains, s0)
        ret = np.zeros(n_chains)
        for t in range(horizon):
            a1 = (sim.random(n_chains)[:, None] > np.cumsum(pis[0][state], axis=1)).sum(1)
            a2 = (sim.random(n_chains)[:, None] > np.cumsum(pis[1][state], axis=1)).sum(1)
            ret += gamma ** t * mdp.rewards[state, a1, a2]
            cdf = np.cumsum(mdp.transitions[state, a1, a2], axis=1)
            state = np.minimum((sim.random(n_chains)[:, None] > cdf).sum(1), 3)
        se = ret.std(ddof=1) / np.sqrt(n_chains)
        truncation = gamma ** horizon * np.abs(mdp.rewards).max() / (1 - gamma)
        assert abs(ret.mean() - j[s0]) <= 3 * se + truncation


def test_greedy_tie_goes_to_lowest_index():
    q = np.array([[1.0, 1.0, 0.5], [0.0, 2.0, 2.0 + 1e-13], [3.0, 1.0, 3.0 - 1e-3]])
    assert np.argmax(greedy(q), axis=1).tolist() == [0, 1, 0]


def test_step_improves_random_instance():
    rng = np.random.default_rng(3)
    mdp = ExactDecMdp.random(rng, 5, (3, 3), 0.9)
    pis = [random_policy(rng, 5, 3), random_policy(rng, 5, 3)]
    new = exact_a2pi_step(mdp, pis)
    assert np.all(exact_policy_eval(mdp, new) >= exact_policy_eval(mdp, pis) - 1e-9)
    for pi in new:
        assert set(np.unique(pi)) <= {0.0, 1.0} and np.allclose(pi.sum(1), 1)


def test_second_agent_responds_to_updated_first_agent():
    rng = np.random.default_rng(4)
    mdp = ExactDecMdp.random(rng, 3, (2, 2), 0.9)
    pis = [random_policy(rng, 3, 2), random_policy(rng, 3, 2)]
    new = exact_a2pi_step(mdp, pis)
    staged_first = greedy(agent_q(mdp, pis, 0))
    assert np.array_equal(new[0], staged_first)
    assert np.array_equal(new[1], greedy(agent_q(mdp, [staged_first, pis[1]], 1)))


def test_fixed_point_is_unchanged():
    rng = np.random.default_rng(5)
    mdp = ExactDecMdp.random(rng, 4, (3, 2), 0.9)
    pis, values = exact_a2pi(mdp, [random_policy(rng, 4, 3), random_policy(rng, 4, 2)])
    again = exact_a2pi_step(mdp, pis)
    assert all(np.array_equal(a, b) for a, b in zip(again, pis))
    assert all(np.all(b >= a - 1e-9) for a, b in zip(values, values[1:]))


def test_one_agent_instance_is_textbook_policy_iteration():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n_s, n_a = int(rng.integers(2, 6)), int(rng.integers(2, 4))
        mdp = ExactDecMdp.random(rng, n_s, (n_a, 1), float(rng.choice([0.5, 0.9])))
        pi = random_policy(rng, n_s, n_a)
        dummy = np.ones((n_s, 1))
        new = exact_a2pi_step(mdp, [pi, dummy])
        oracle = textbook_pi_step(mdp.transitions[:, :, 0], mdp.rewards[:, :, 0], mdp.gamma, pi)
        assert np.array_equal(new[0], oracle) and np.array_equal(new[1], dummy)


def test_max_sweeps_is_enforced():
    rng = np.random.default_rng(7)
    mdp = ExactDecMdp.random(rng, 5, (3, 3), 0.9)
    with pytest.raises(RuntimeError):
        exact_a2pi(mdp, [random_policy(rng, 5, 3), random_policy(rng, 5, 3)], max_sweeps=0)

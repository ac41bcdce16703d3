"""Small deterministic MDP for checking DSAC against soft value iteration.

States are one-hot vectors fed through :class:`IdentityEncoder`, so with a
linear head every Q entry is an independent parameter and DSAC should land
on the soft Bellman fixed point at the fixed temperature.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .dsac import DSAC, DsacConfig, ReplayBuffer, run_training
from .encoders import IdentityEncoder


@dataclass
class TabularMDP:
    transitions: np.ndarray = field(default_factory=lambda: np.array([[0, 1], [1, 2], [2, 0]]))
    rewards: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.1], [0.2, 0.0], [0.0, 1.0]]))
    start: int = 0
    horizon: int = 20

    @property
    def n_states(self):
        return self.rewards.shape[0]

    @property
    def n_actions(self):
        return self.rewards.shape[1]


def soft_value_iteration(mdp, alpha, gamma, tol=1e-10, max_iter=100_000):
    """Iterate ``Q <- r + gamma * alpha * logsumexp(Q(s') / alpha)`` to a fixed point."""
    q = np.zeros_like(mdp.rewards)
    for _ in range(max_iter):
        v = alpha * logsumexp(q / alpha, axis=1)
        q_new = mdp.rewards + gamma * v[mdp.transitions]
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise RuntimeError("soft value iteration did not converge")


def soft_policy_value(mdp, policy, alpha, gamma):
    """Exact soft state values of ``policy`` (rows are action distributions)."""
    n = mdp.n_states
    P = np.zeros((n, n))
    for s in range(n):
        for a in range(mdp.n_actions):
            P[s, mdp.transitions[s, a]] += policy[s, a]
    logp = np.log(np.clip(policy, 1e-300, None))
    r_pi = np.sum(policy * (mdp.rewards - alpha * logp), axis=1)
    return np.linalg.solve(np.eye(n) - gamma * P, r_pi)


class TabularEnv:
    """Episodes of fixed length; the cut-off is a truncation, not a terminal."""

    def __init__(self, mdp):
        self.mdp = mdp
        self.state = mdp.start
        self.t = 0

    def _obs(self):
        return (np.eye(self.mdp.n_states)[self.state],)

    def reset(self):
        self.state, self.t = self.mdp.start, 0
        return self._obs()

    def step(self, action):
        r = float(self.mdp.rewards[self.state, action])
        self.state = int(self.mdp.transitions[self.state, action])
        self.t += 1
        return self._obs(), r, False, {"truncated": self.t >= self.mdp.horizon}


def tabular_agent(mdp, alpha=0.5, gamma=0.9, lr=3e-3, tau=0.05, batch_size=32, seed=0):
    config = DsacConfig(
        gamma=gamma, tau=tau, lr=lr, batch_size=batch_size, alpha0=alpha, auto_entropy=False,
        hidden=(), n_actions=mdp.n_actions,
    )
    rng = np.random.default_rng(seed)
    return DSAC(IdentityEncoder(mdp.n_states), config, rng)


def learned_tables(agent, mdp):
    """``(min(Q1, Q2), Q1, Q2, policy)`` over all states."""
    states = (np.eye(mdp.n_states),)
    q1, q2 = agent.critic_values(states)
    probs, _, _ = agent.policy_values(states)
    return np.minimum(q1.data, q2.data), q1.data, q2.data, probs.data


def run_tabular(mdp=None, n_rounds=40, episodes_per_round=25, seed=0, **agent_kw):
    """Train in rounds; returns ``(agent, oracle Q, per-round records)``.

    Each record holds the max Q error and the exact soft objective of the
    current policy from the start state.
    """
    mdp = mdp or TabularMDP()
    agent = tabular_agent(mdp, seed=seed, **agent_kw)
    cfg = agent.config
    oracle = soft_value_iteration(mdp, cfg.alpha0, cfg.gamma)
    rng = np.random.default_rng(seed + 1)
    buffer = ReplayBuffer(cfg.buffer_capacity, np.random.default_rng(seed + 2))
    env = TabularEnv(mdp)
    records = []
    for _ in range(n_rounds):
        run_training(env, agent, episodes_per_round, rng, buffer=buffer)
        q_min, q1, q2, policy = learned_tables(agent, mdp)
        err = max(np.max(np.abs(q1 - oracle)), np.max(np.abs(q2 - oracle)))
        objective = soft_policy_value(mdp, policy, cfg.alpha0, cfg.gamma)[mdp.start]
        records.append({"q_error": float(err), "objective": float(objective)})
    return agent, oracle, records


def optimal_soft_policy(q, alpha):
    return softmax(q / alpha, axis=1)

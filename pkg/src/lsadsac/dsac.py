"""Discrete soft actor-critic with twin critics and automatic temperature."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import NumericError

N_ACTIONS = 81
TARGET_ENTROPY_FRACTION = 0.3  # of the maximum entropy ln(n_actions); 0.98 makes alpha diverge here


@dataclass
class DsacConfig:
    gamma: float = 0.95
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 128
    alpha0: float = 0.2
    auto_entropy: bool = True
    target_entropy: float | None = None  # None: TARGET_ENTROPY_FRACTION * ln(n_actions)
    buffer_capacity: int = 100_000
    hidden: tuple = (128, 128)
    n_actions: int = N_ACTIONS
    update_every_step: bool = True

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.target_entropy is None:
            self.target_entropy = TARGET_ENTROPY_FRACTION * math.log(self.n_actions)
        self.hidden = tuple(self.hidden)


def head_spec(in_width, hidden, n_actions):
    widths = [in_width, *hidden]
    spec = [(a, b, "relu") for a, b in zip(widths[:-1], widths[1:])]
    spec.append((widths[-1], n_actions, None))
    return spec


# ---------------------------------------------------------------- forward passes


def critic_forward(p, encoded, spec):
    """Both Q vectors ``(B, A)`` from one encoded state; heads under ``q1.``/``q2.``."""
    return dc.mlp_forward(p, spec, encoded, "q1."), dc.mlp_forward(p, spec, encoded, "q2.")


def policy_forward(p, encoded, spec):
    """Action probabilities and their logs, each ``(B, A)``."""
    logits = dc.mlp_forward(p, spec, encoded, "pi.")
    return dc.softmax(logits, axis=-1), dc.log_softmax(logits, axis=-1)


def select_action(probs, mode, rng=None):
    """Sample from ``probs`` or take the argmax (lowest index on ties)."""
    probs = np.asarray(probs, dtype=float)
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        cdf = np.cumsum(probs)
        u = rng.random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))
    raise ValueError(f"unknown action mode {mode!r}")


# ---------------------------------------------------------------- losses


def compute_target(reward, done, q1_next, q2_next, p_next, logp_next, alpha, gamma):
    """``r + gamma * sum_a p'(a) (min Q'(a) - alpha log p'(a))``, zeroed past terminals."""
    soft_q = np.minimum(q1_next, q2_next) - alpha * logp_next
    v_next = np.sum(p_next * soft_q, axis=-1)
    return reward + gamma * (1.0 - done.astype(float)) * v_next


def critic_loss(q1, q2, actions, target):
    target = np.asarray(target, dtype=float)
    e1 = dc.gather(q1, actions) - target
    e2 = dc.gather(q2, actions) - target
    return dc.mean(e1 * e1) + dc.mean(e2 * e2)


def policy_loss(q1, q2, probs, log_probs, alpha):
    """``-mean(E_p[min Q] + alpha H)``.  ``q1``/``q2`` are plain arrays (held constant)."""
    q_min = np.minimum(q1, q2)
    expected_q = dc.sum(probs * q_min, axis=-1)
    entropy = dc.neg(dc.sum(probs * log_probs, axis=-1))
    loss = dc.neg(dc.mean(expected_q + alpha * entropy))
    return loss, entropy.data


def temperature_loss(log_alpha, probs, log_probs, target_entropy):
    """Batch mean of ``sum_a p(a) (-alpha log p(a) - alpha H_target)`` with ``p`` constant."""
    alpha = dc.exp(log_alpha)
    per_action = (-np.asarray(log_probs) - target_entropy) * np.asarray(probs)
    return dc.mean(alpha * per_action.sum(axis=-1))


def soft_update(store, source_prefix, target_prefix, tau):
    for name in store.names(source_prefix):
        dst = target_prefix + name[len(source_prefix):]
        target = store[dst]
        target *= 1.0 - tau
        target += tau * store[name]


# ---------------------------------------------------------------- replay buffer


@dataclass
class Batch:
    obs: tuple
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: tuple
    dones: np.ndarray


class ReplayBuffer:
    """FIFO ring of transitions; observations are tuples of arrays."""

    def __init__(self, capacity, rng=None):
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self._obs = None
        self._next = None
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self._ptr = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _allocate(self, obs):
        self._obs = [np.zeros((self.capacity,) + np.shape(x)) for x in obs]
        self._next = [np.zeros((self.capacity,) + np.shape(x)) for x in obs]

    def push(self, obs, action, reward, next_obs, done):
        if self._obs is None:
            self._allocate(obs)
        i = self._ptr
        for store, x in zip(self._obs, obs):
            store[i] = x
        for store, x in zip(self._next, next_obs):
            store[i] = x
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = done
        self._ptr = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions):
        for t in transitions:
            self.push(*t)

    def oldest_index(self):
        return self._ptr if self._size == self.capacity else 0

    def sample(self, batch_size):
        idx = self.rng.choice(self._size, size=batch_size, replace=False)
        return Batch(
            tuple(s[idx] for s in self._obs),
            self.actions[idx],
            self.rewards[idx],
            tuple(s[idx] for s in self._next),
            self.dones[idx],
        )


# ---------------------------------------------------------------- agent


class DSAC:
    """Critic (encoder + twin heads), target critic, policy (encoder + head), log-temperature.

    Parameter names: ``critic.enc.*``, ``critic.q1.*``, ``critic.q2.*``,
    ``critic_target.*`` mirroring ``critic.*``, ``policy.enc.*``,
    ``policy.pi.*`` and ``log_alpha``.
    """

    def __init__(self, encoder, config=None, rng=None, params=None):
        self.encoder = encoder
        self.config = config or DsacConfig()
        cfg = self.config
        self.spec = head_spec(encoder.out_width, cfg.hidden, cfg.n_actions)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng()
            params = dc.ParameterStore()
            encoder.init(params, "critic.enc.", rng)
            dc.init_mlp(params, "critic.q1.", self.spec, rng)
            dc.init_mlp(params, "critic.q2.", self.spec, rng)
            encoder.init(params, "policy.enc.", rng)
            dc.init_mlp(params, "policy.pi.", self.spec, rng)
            for name in params.names("critic."):
                params.add("critic_target." + name[len("critic."):], params[name].copy())
            params.add("log_alpha", np.array(math.log(cfg.alpha0)))
        self.params = params
        self.critic_opt = dc.OptimizerState(params, params.names("critic."), cfg.lr)
        self.policy_opt = dc.OptimizerState(params, params.names("policy."), cfg.lr)
        self.alpha_opt = dc.OptimizerState(params, ["log_alpha"], cfg.lr)

    @property
    def alpha(self):
        return float(np.exp(self.params["log_alpha"]))

    # forward helpers -------------------------------------------------

    def critic_values(self, obs, prefix="critic.", grad=False):
        p = self.params.view(prefix, grad)
        encoded, _ = self.encoder.forward(p.sub("enc."), obs)
        return critic_forward(p, encoded, self.spec)

    def policy_values(self, obs, grad=False):
        p = self.params.view("policy.", grad)
        encoded, report = self.encoder.forward(p.sub("enc."), obs)
        probs, log_probs = policy_forward(p, encoded, self.spec)
        return probs, log_probs, report

    def act(self, obs, mode="sample", rng=None):
        """Action for one unbatched observation; returns ``(action, probs, report)``."""
        batched = tuple(np.asarray(x)[None] for x in obs)
        probs, _, report = self.policy_values(batched)
        return select_action(probs.data[0], mode, rng), probs.data[0], report

    # update ------------------------------------------------------------

    def update_step(self, batch):
        """Critic, policy and temperature updates, then the Polyak target update."""
        cfg = self.config
        alpha = self.alpha

        p_next, logp_next, _ = self.policy_values(batch.next_obs)
        q1_next, q2_next = self.critic_values(batch.next_obs, "critic_target.")
        target = compute_target(
            batch.rewards, batch.dones, q1_next.data, q2_next.data, p_next.data, logp_next.data,
            alpha, cfg.gamma,
        )

        q1, q2 = self.critic_values(batch.obs, grad=True)
        loss_q = critic_loss(q1, q2, batch.actions, target)

        probs, log_probs, _ = self.policy_values(batch.obs, grad=True)
        loss_p, entropy = policy_loss(q1.data, q2.data, probs, log_probs, alpha)

        grads_q = dc.backward(loss_q)
        grads_p = dc.backward(loss_p)
        dc.adam_step(self.params, grads_q, self.critic_opt)
        dc.adam_step(self.params, grads_p, self.policy_opt)

        loss_a = None
        if cfg.auto_entropy:
            log_alpha = dc.Tensor(self.params["log_alpha"], requires_grad=True, name="log_alpha")
            loss_a = temperature_loss(log_alpha, probs.data, log_probs.data, cfg.target_entropy)
            dc.adam_step(self.params, dc.backward(loss_a), self.alpha_opt)

        soft_update(self.params, "critic.", "critic_target.", cfg.tau)
        return {
            "critic_loss": float(loss_q.data),
            "policy_loss": float(loss_p.data),
            "alpha_loss": None if loss_a is None else float(loss_a.data),
            "entropy": float(np.mean(entropy)),
            "alpha": self.alpha,
        }


# ---------------------------------------------------------------- training loop

LOG_FIELDS = ["episode", "steps", "cum_reward", "outcome", "alpha", "critic_loss", "policy_loss", "buffer_size"]


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def rewards(self):
        return np.array([r["cum_reward"] for r in self.rows])


def run_training(env, agent, n_episodes, rng, buffer=None, callback=None, max_steps=None):
    """Roll ``n_episodes`` with sampled actions, training every step once the buffer holds a batch.

    Transitions of an episode enter the buffer when it ends.  ``callback``
    is called with each finished log row.
    """
    cfg = agent.config
    buffer = buffer if buffer is not None else ReplayBuffer(cfg.buffer_capacity, rng)
    log = TrainingLog()
    for episode in range(n_episodes):
        obs = env.reset()
        episode_data = []
        cum_reward = 0.0
        stats = {}
        losses_q, losses_p = [], []
        steps = 0
        outcome = None
        while True:
            action, _, _ = agent.act(obs, "sample", rng)
            next_obs, r, done, info = env.step(action)
            episode_data.append((obs, action, r, next_obs, done))
            cum_reward += r
            steps += 1
            if cfg.update_every_step and len(buffer) >= cfg.batch_size:
                try:
                    stats = agent.update_step(buffer.sample(cfg.batch_size))
                except NumericError as err:
                    raise NumericError(f"episode {episode} step {steps}: {err}", name=err.name) from err
                losses_q.append(stats["critic_loss"])
                losses_p.append(stats["policy_loss"])
            obs = next_obs
            truncated = info.get("truncated", False) or (max_steps is not None and steps >= max_steps)
            if done or truncated:
                events = info.get("events")
                outcome = events.outcome if events is not None else "truncated"
                break
        buffer.extend(episode_data)
        row = {
            "episode": episode,
            "steps": steps,
            "cum_reward": cum_reward,
            "outcome": outcome,
            "alpha": agent.alpha,
            "critic_loss": float(np.mean(losses_q)) if losses_q else float("nan"),
            "policy_loss": float(np.mean(losses_p)) if losses_p else float("nan"),
            "buffer_size": len(buffer),
        }
        log.rows.append(row)
        if callback is not None:
            callback(row)
    return agent.params, log

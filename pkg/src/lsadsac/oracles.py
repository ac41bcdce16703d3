"""Independent reference computations and the checks built on them.

Every suite returns a list of :class:`Check` rows; the CLI prints them and
the acceptance tests assert on them.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dsac import critic_forward, critic_loss, head_spec, policy_forward, policy_loss
from .encoders import CrowdEncoder, pool_obstacles
from .orca import OrcaParams, circle_agents, rollout
from .simulator import WorldState, classify, make_agent, reward
from .tabular import run_tabular


@dataclass
class Check:
    name: str
    value: float
    tolerance: str
    passed: bool

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.6g} ({self.tolerance})"


# ---------------------------------------------------------------- reward

REWARD_BRANCHES = ("collision", "goal", "timeout", "discomfort", "none")


def reward_oracle(d_min, t, t_max, robot_p, goal, radius, d_start):
    """Piecewise reward straight from the raw step quantities: ``(value, branch)``."""
    remaining = math.dist(robot_p, goal)
    table = [
        ("collision", d_min < 0, lambda: -0.25),
        ("goal", remaining <= radius, lambda: 1.0),
        ("timeout", t >= t_max, lambda: (d_start - remaining) / d_start * 0.5),
        ("discomfort", 0 < d_min < 0.2, lambda: d_min / 2 - 0.1),
        ("none", True, lambda: 0.0),
    ]
    for branch, hit, value in table:
        if hit:
            return value(), branch


def random_reward_case(rng, t_max=25.0, dt=0.25, radius=0.3):
    """One step snapshot drawn so that every branch is common."""
    goal = np.array([0.0, 4.0])
    mode = rng.integers(5)
    d_min = {0: rng.uniform(-0.6, 0.0), 3: rng.uniform(0.0, 0.2)}.get(mode, rng.uniform(-0.3, 3.0))
    if mode == 1:
        angle = rng.uniform(0, 2 * math.pi)
        p = goal + rng.uniform(0, radius) * np.array([math.cos(angle), math.sin(angle)])
    else:
        p = rng.uniform(-5, 5, size=2)
    t = t_max if mode == 2 or rng.random() < 0.1 else dt * rng.integers(1, int(t_max / dt))
    return float(d_min), float(t), p, goal


def reward_suite(n=100_000, seed=0, min_hits=1000):
    rng = np.random.default_rng(seed)
    t_max, radius, d_start = 25.0, 0.3, 8.0
    mismatches = 0
    hits = dict.fromkeys(REWARD_BRANCHES, 0)
    for _ in range(n):
        d_min, t, p, goal = random_reward_case(rng, t_max, radius=radius)
        expected, branch = reward_oracle(d_min, t, t_max, p, goal, radius, d_start)
        hits[branch] += 1
        robot = make_agent(p, goal, radius)
        world = WorldState(robot, [], t, 0.25, t_max, d_start=d_start)
        events = classify(d_min, t, t_max, math.dist(p, goal), radius)
        if reward(events, world, d_start) != expected:
            mismatches += 1
    checks = [Check(f"reward mismatches over {n} inputs", mismatches, "== 0", mismatches == 0)]
    checks += [Check(f"reward branch {b} hits", hits[b], f">= {min_hits}", hits[b] >= min_hits) for b in REWARD_BRANCHES]
    return checks


# ---------------------------------------------------------------- gradients


def gradient_check(variant, head, seed=0, n_coords=64, n_obstacles=3, batch=4, hidden=(128, 128)):
    """Worst relative error of a central-difference check through encoder + head."""
    rng = np.random.default_rng(seed)
    store = dc.ParameterStore()
    encoder = CrowdEncoder(variant, n_obstacles=n_obstacles)
    encoder.init(store, "enc.", rng)
    spec = head_spec(encoder.out_width, hidden, 81)
    prefixes = ("q1.", "q2.") if head == "critic" else ("pi.",)
    for prefix in prefixes:
        dc.init_mlp(store, prefix, spec, rng)
    robot = np.concatenate(
        [rng.uniform(-3, 3, (batch, 4)), np.full((batch, 1), 0.3), rng.uniform(-3, 3, (batch, 2)),
         np.ones((batch, 1)), rng.uniform(-3, 3, (batch, 1))], axis=1
    )
    obstacles = np.concatenate([rng.uniform(-3, 3, (batch, n_obstacles, 4)), np.full((batch, n_obstacles, 1), 0.3)], axis=2)
    actions = rng.integers(81, size=batch)
    target = rng.normal(size=batch)
    q_fixed = rng.normal(size=(2, batch, 81))

    def loss(params, grad=False):
        p = params.view(grad=grad)
        encoded, _ = encoder.forward(p.sub("enc."), (robot, obstacles))
        if head == "critic":
            q1, q2 = critic_forward(p, encoded, spec)
            return critic_loss(q1, q2, actions, target)
        probs, log_probs = policy_forward(p, encoded, spec)
        return policy_loss(q_fixed[0], q_fixed[1], probs, log_probs, 0.2)[0]

    grads = dc.backward(loss(store, grad=True))
    rows = dc.finite_difference_check(lambda s: float(loss(s).data), store, grads, rng, n_coords)
    return max(r[4] for r in rows)


def grad_suite(seed=0, tol=1e-4):
    checks = []
    for variant in ("RG", "AW", "SA", "LSA"):
        for head in ("critic", "policy"):
            worst = gradient_check(variant, head, seed)
            checks.append(Check(f"grad {variant}+{head} worst rel err", worst, f"< {tol:g}", worst < tol))
    return checks


# ---------------------------------------------------------------- tabular


def tabular_suite(seed=0, tol=1e-2, n_rounds=12):
    _, _, records = run_tabular(n_rounds=n_rounds, seed=seed)
    err = records[-1]["q_error"]
    objectives = [r["objective"] for r in records]
    worst_drop = max([a - b for a, b in zip(objectives, objectives[1:])] + [0.0])
    return [
        Check("tabular max |Q - Q_softVI|", err, f"< {tol:g}", err < tol),
        Check("tabular soft objective worst drop", worst_drop, f"<= {tol:g}", worst_drop <= tol),
    ]


# ---------------------------------------------------------------- orca


def orca_crossings(n_agents, n_seeds=100, params=OrcaParams()):
    """Number of seeds whose circle crossing completes with no overlap."""
    clean = 0
    for seed in range(n_seeds):
        agents = circle_agents(n_agents, np.random.default_rng(seed))
        worst, _, reached = rollout(agents, params)
        clean += worst >= 0 and reached
    return clean


def orca_suite(n_seeds=100):
    four = orca_crossings(4, n_seeds)
    two = orca_crossings(2, n_seeds)
    return [
        Check("orca 4-agent clean crossings", four, f">= {math.ceil(0.95 * n_seeds)} of {n_seeds}", four >= 0.95 * n_seeds),
        Check("orca 2-agent head-on clean crossings", two, f"== {n_seeds}", two == n_seeds),
    ]


# ---------------------------------------------------------------- injectivity


def injectivity_gaps(seed, width=50):
    """``(sum gap, lstm gap)`` between pooled multisets {3, 1} and {2, 2}."""
    rng = np.random.default_rng(seed)
    store = dc.ParameterStore()
    dc.init_lstm(store, "lstm.", width, width, rng)
    a = np.stack([np.full(width, 3.0), np.full(width, 1.0)])[None]
    b = np.stack([np.full(width, 2.0), np.full(width, 2.0)])[None]
    p = store.view()
    sum_gap = float(np.max(np.abs(pool_obstacles(p, a, "sum").data - pool_obstacles(p, b, "sum").data)))
    lstm_gap = float(np.linalg.norm(pool_obstacles(p, a, "lstm").data - pool_obstacles(p, b, "lstm").data))
    return sum_gap, lstm_gap


def inject_suite(n_seeds=20, need=19):
    gaps = [injectivity_gaps(seed) for seed in range(n_seeds)]
    separated = sum(g > 1e-6 for _, g in gaps)
    sum_worst = max(s for s, _ in gaps)
    return [
        Check("sum pooling gap (3,1) vs (2,2)", sum_worst, "== 0", sum_worst == 0.0),
        Check("lstm pooling separates (3,1) vs (2,2)", separated, f">= {need} of {n_seeds}", separated >= need),
    ]


SUITES = {
    "grad": grad_suite,
    "tabular": tabular_suite,
    "reward": reward_suite,
    "orca": orca_suite,
    "inject": inject_suite,
}

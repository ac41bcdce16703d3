"""Training, evaluation, attention inspection and rendering on top of the core modules."""

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .dsac import DSAC, LOG_FIELDS, ReplayBuffer, run_training
from .encoders import CrowdEncoder
from .errors import InvalidInputError, UsageError
from .simulator import TRAJECTORY_FIELDS, CrowdEnv, min_clearance, trajectory_rows, write_trajectory_csv

SEED_STREAMS = ("init", "env", "act", "buffer")


def seed_streams(seed):
    """Independent generators for parameter init, spawning, acting and replay sampling."""
    children = np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(SEED_STREAMS, children)}


def build_encoder(cfg):
    return CrowdEncoder(cfg.run.encoder, cfg.run.ablation, cfg.sim.n_obstacles, cfg.run.robot_feature, cfg.run.rg_width)


def build_agent(cfg, rng=None, params=None):
    return DSAC(build_encoder(cfg), dataclasses.replace(cfg.dsac), rng, params)


def build_env(cfg, rng):
    return CrowdEnv(dataclasses.replace(cfg.sim), rng=rng)


# ---------------------------------------------------------------- checkpoints


def checkpoint_metadata(cfg, episode):
    return {
        "encoder": cfg.run.encoder,
        "ablation": cfg.run.ablation,
        "model_hash": cfg.model_digest(),
        "config_hash": cfg.digest(),
        "n_obstacles": cfg.sim.n_obstacles,
        "episode": episode,
    }


def save_checkpoint(path, params, cfg, episode):
    with open(path, "wb") as fh:
        fh.write(dc.serialize_params(params, checkpoint_metadata(cfg, episode)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return dc.deserialize_params(fh.read(), with_metadata=True)


def check_compatible(metadata, cfg):
    """Refuse checkpoints whose encoder or parameter layout differs from ``cfg``."""
    if metadata.get("encoder") != cfg.run.encoder or metadata.get("ablation") != cfg.run.ablation:
        raise UsageError(
            f"checkpoint encoder {metadata.get('encoder')}/{metadata.get('ablation')} "
            f"does not match config encoder {cfg.run.encoder}/{cfg.run.ablation}"
        )
    if metadata.get("model_hash") != cfg.model_digest():
        raise UsageError(
            f"checkpoint model hash {metadata.get('model_hash')} does not match config {cfg.model_digest()}"
        )


# ---------------------------------------------------------------- training


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_cell(row[k]) for k in fields] if isinstance(row, dict) else [_cell(v) for v in row])


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return "" if value is None else str(value)


def moving_average(values, window=100):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    csum = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def train(cfg, log=print):
    """Run training into ``cfg.run.out``; returns ``(agent, TrainingLog)``.

    The directory receives ``config.ini``, ``training.csv`` (one row per
    finished episode, flushed as it goes), periodic checkpoints and
    ``reward_curve.svg``.
    """
    out = cfg.run.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(cfg.to_text())
    rngs = seed_streams(cfg.run.seed)
    agent = build_agent(cfg, rngs["init"])
    env = build_env(cfg, rngs["env"])
    buffer = ReplayBuffer(cfg.dsac.buffer_capacity, rngs["buffer"])
    save_checkpoint(os.path.join(out, "ckpt_000000.lsad"), agent.params, cfg, 0)

    csv_path = os.path.join(out, "training.csv")
    fh = open(csv_path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(LOG_FIELDS)

    def on_episode(row):
        writer.writerow([_cell(row[k]) for k in LOG_FIELDS])
        fh.flush()
        log_rows.append(row)
        done = row["episode"] + 1
        if done % cfg.run.checkpoint_every == 0:
            save_checkpoint(os.path.join(out, f"ckpt_{done:06d}.lsad"), agent.params, cfg, done)
            recent = [r["outcome"] == "success" for r in log_rows[-cfg.run.checkpoint_every:]]
            log(f"episode {done}: alpha {row['alpha']:.4f} recent success {np.mean(recent):.2f}")

    log_rows = []
    try:
        _, training_log = run_training(env, agent, cfg.run.episodes, rngs["act"], buffer, on_episode)
    finally:
        fh.close()
        plot_reward_curve(os.path.join(out, "reward_curve.svg"), [r["cum_reward"] for r in log_rows], cfg.run.encoder)
    save_checkpoint(os.path.join(out, "final.lsad"), agent.params, cfg, cfg.run.episodes)
    return agent, training_log


# ---------------------------------------------------------------- evaluation


@dataclass
class EpisodeRecord:
    outcome: str
    duration: float
    min_clearance: float
    cum_reward: float
    trajectory: list = field(default_factory=list, repr=False)


@dataclass
class EvalSummary:
    success_rate: float
    time_to_goal: float
    collision_rate: float
    timeout_rate: float
    mean_min_distance: float
    mean_reward: float
    n_episodes: int

    def lines(self):
        return [f"{f.name}: {getattr(self, f.name):.4f}" for f in dataclasses.fields(self)][:-1] + [
            f"n_episodes: {self.n_episodes}"
        ]


def summarize(records):
    n = len(records)
    if n == 0:
        raise InvalidInputError("no episodes to summarize")
    outcomes = [r.outcome for r in records]
    times = [r.duration for r in records if r.outcome == "success"]
    clearances = [r.min_clearance for r in records if math.isfinite(r.min_clearance)]
    return EvalSummary(
        success_rate=outcomes.count("success") / n,
        time_to_goal=float(np.mean(times)) if times else math.nan,
        collision_rate=outcomes.count("collision") / n,
        timeout_rate=outcomes.count("timeout") / n,
        mean_min_distance=float(np.mean(clearances)) if clearances else math.nan,
        mean_reward=float(np.mean([r.cum_reward for r in records])),
        n_episodes=n,
    )


def run_episode(env, policy, keep_trajectory=False):
    """Play one episode with ``policy(obs) -> action``."""
    obs = env.reset()
    worlds = [env.world]
    clearance = min_clearance(env.world)
    cum, done, info = 0.0, False, {}
    while not done:
        obs, r, done, info = env.step(policy(obs))
        cum += r
        clearance = min(clearance, info["events"].d_min_step)
        if keep_trajectory:
            worlds.append(env.world)
    events = info["events"]
    return EpisodeRecord(events.outcome, env.world.t, clearance, cum, worlds if keep_trajectory else [])


def agent_policy(agent, mode="greedy", rng=None, reports=None):
    def policy(obs):
        action, _, report = agent.act(obs, mode, rng)
        if reports is not None:
            reports.append(report)
        return action

    return policy


def evaluate(agent, cfg, n_episodes, seed=None, keep_trajectories=False):
    """Greedy episodes on spawn seeds disjoint from training; returns ``(summary, records)``."""
    seed = cfg.run.seed if seed is None else seed
    env_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    env = build_env(cfg, env_rng)
    policy = agent_policy(agent)
    records = [run_episode(env, policy, keep_trajectories) for _ in range(n_episodes)]
    return summarize(records), records


def load_agent(path, cfg):
    params, metadata = load_checkpoint(path)
    check_compatible(metadata, cfg)
    return build_agent(cfg, params=params), metadata


EPISODE_FIELDS = ["episode", "outcome", "duration", "min_clearance", "cum_reward"]


def eval_checkpoint(path, cfg, n_episodes, out):
    agent, _ = load_agent(path, cfg)
    summary, records = evaluate(agent, cfg, n_episodes)
    os.makedirs(out, exist_ok=True)
    rows = [[i, r.outcome, r.duration, r.min_clearance, r.cum_reward] for i, r in enumerate(records)]
    write_csv(os.path.join(out, f"eval_{cfg.sim.scenario}.csv"), EPISODE_FIELDS, rows)
    with open(os.path.join(out, f"eval_{cfg.sim.scenario}_summary.txt"), "w") as fh:
        fh.write("\n".join(summary.lines()) + "\n")
    return summary


# ---------------------------------------------------------------- attention inspection

ATTENTION_FIELDS = ["episode", "step", "obstacle_id", "raw_score", "softmax_weight"]


def inspect_episode(path, cfg, episode_seed, out, label_every=8):
    """Replay one greedy episode and dump per-step attention rows plus an annotated render."""
    agent, _ = load_agent(path, cfg)
    if not agent.encoder.has_attention:
        raise UsageError("encoder has no attention scores")
    env = build_env(cfg, np.random.default_rng(episode_seed))
    reports = []
    record = run_episode(env, agent_policy(agent, reports=reports), keep_trajectory=True)
    rows = []
    for step, report in enumerate(reports):
        if report is None:
            continue
        for k, (score, weight) in enumerate(zip(report.scores[0], report.weights[0])):
            rows.append([episode_seed, step, k, float(score), float(weight)])
    os.makedirs(out, exist_ok=True)
    write_csv(os.path.join(out, "attention.csv"), ATTENTION_FIELDS, rows)
    traj = trajectory_rows(episode_seed, record.trajectory)
    write_trajectory_csv(os.path.join(out, "trajectory.csv"), traj)
    weights = {(r[1], r[2]): r[4] for r in rows}
    render_trajectories(os.path.join(out, "attention.svg"), traj, radius=cfg.sim.robot_radius,
                        weights=weights, label_every=label_every)
    return rows, record


# ---------------------------------------------------------------- trajectory files and plots


def read_trajectory_csv(path):
    """Parse a trajectory CSV; malformed lines raise with their line number."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if header != TRAJECTORY_FIELDS:
            raise InvalidInputError(f"line 1: expected header {','.join(TRAJECTORY_FIELDS)}")
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(TRAJECTORY_FIELDS):
                raise InvalidInputError(f"line {lineno}: expected {len(TRAJECTORY_FIELDS)} fields, got {len(raw)}")
            try:
                rows.append([int(raw[0]), int(raw[1]), int(raw[2])] + [float(v) for v in raw[3:]])
            except ValueError:
                raise InvalidInputError(f"line {lineno}: non-numeric field") from None
    return rows


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "none"  # keep labels as <text> elements
    plt.rcParams["svg.hashsalt"] = "lsadsac"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()


def plot_reward_curve(path, rewards, label="", window=100):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(rewards):
        x = np.arange(len(rewards))
        ax.plot(x, rewards, color="0.8", linewidth=0.6)
        ax.plot(x, moving_average(rewards, window), label=f"{label} ({window}-episode mean)".strip())
        ax.legend(loc="lower right")
    ax.set_xlabel("episode")
    ax.set_ylabel("cumulative reward")
    _save(fig, path)
    plt.close(fig)


def render_trajectories(path, rows, radius=0.3, weights=None, label_every=1):
    """Paths per agent with step labels; returns the number of labels per agent.

    Each agent gets one text label per trajectory row when ``label_every``
    is 1.  ``weights`` maps ``(step, obstacle index)`` to an attention
    weight printed next to the obstacle at labelled steps.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    by_agent = {}
    for row in rows:
        by_agent.setdefault(row[2], []).append(row)
    labels = {}
    for agent_id, pts in sorted(by_agent.items()):
        pts.sort(key=lambda r: r[1])
        xs = [r[3] for r in pts]
        ys = [r[4] for r in pts]
        color = "tab:red" if agent_id == 0 else f"C{agent_id % 10}"
        ax.plot(xs, ys, "-", color=color, linewidth=1.0, label="robot" if agent_id == 0 else f"agent {agent_id}")
        ax.plot(xs[0], ys[0], "o", color=color)
        ax.plot(xs[-1], ys[-1], "*", color=color, markersize=10)
        count = 0
        for r in pts:
            if r[1] % label_every:
                continue
            text = str(r[1])
            if weights is not None and agent_id > 0 and (r[1], agent_id - 1) in weights:
                text += f" ({weights[(r[1], agent_id - 1)]:.2f})"
            ax.annotate(text, (r[3], r[4]), fontsize=6, color=color)
            count += 1
        labels[agent_id] = count
    steps = {}
    for row in rows:
        steps.setdefault(row[1], []).append(row)
    for step_rows in steps.values():
        for i, a in enumerate(step_rows):
            for b in step_rows[i + 1:]:
                if math.hypot(a[3] - b[3], a[4] - b[4]) < 2 * radius:
                    ax.plot((a[3] + b[3]) / 2, (a[4] + b[4]) / 2, "x", color="black", markersize=9)
    if by_agent:
        ax.legend(loc="upper right", fontsize=7)
    _save(fig, path)
    plt.close(fig)
    return labels


def render_file(csv_path, out_path, radius=0.3):
    return render_trajectories(out_path, read_trajectory_csv(csv_path), radius)


# ---------------------------------------------------------------- grids


def train_grid(cfg, variants, seeds, log=print):
    """Train every ``(variant, seed)`` into ``out/<variant>_s<seed>``; returns final moving averages."""
    results = {}
    for variant in variants:
        for seed in seeds:
            run = dataclasses.replace(cfg.run, encoder=variant, seed=seed, out=os.path.join(cfg.run.out, f"{variant}_s{seed}"))
            sub = RunConfig(run, dataclasses.replace(cfg.sim), dataclasses.replace(cfg.dsac)).validate()
            _, training_log = train(sub, log)
            rewards = training_log.rewards()
            results[(variant, seed)] = float(moving_average(rewards)[-1]) if rewards.size else math.nan
    return results

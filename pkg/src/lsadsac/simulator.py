"""Circle- and square-crossing worlds: one holonomic robot among ORCA agents."""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidActionError, SpawnError, UsageError
from .orca import OrcaPolicy

N_ACTIONS = 81
N_DIRECTIONS = 16
N_SPEEDS = 5
ROBOT_DIM = 9
OBSTACLE_DIM = 5
DISCOMFORT_DIST = 0.2


@dataclass
class SimConfig:
    scenario: str = "circle"
    n_obstacles: int = 1
    dt: float = 0.25
    t_max: float = 25.0
    r_circle: float = 4.0
    arena: float = 10.0
    robot_radius: float = 0.3
    obstacle_radius: float = 0.3
    v_pref: float = 1.0
    angle_jitter: float = math.pi / 18
    radial_jitter: float = 0.3
    spawn_attempts: int = 100


@dataclass
class AgentState:
    p: np.ndarray
    v: np.ndarray
    r: float
    goal: np.ndarray
    v_pref: float
    theta: float = 0.0

    def observable(self):
        return np.array([self.p[0], self.p[1], self.v[0], self.v[1], self.r])

    def full(self):
        return np.array(
            [self.p[0], self.p[1], self.v[0], self.v[1], self.r,
             self.goal[0], self.goal[1], self.v_pref, self.theta]
        )

    def moved(self, velocity, dt):
        velocity = np.asarray(velocity, dtype=float)
        speed = math.hypot(velocity[0], velocity[1])
        theta = math.atan2(velocity[1], velocity[0]) if speed > 0 else self.theta
        return replace(self, p=self.p + dt * velocity, v=velocity.copy(), theta=theta)


def make_agent(p, goal, r=0.3, v_pref=1.0, v=(0.0, 0.0)):
    p = np.asarray(p, dtype=float)
    goal = np.asarray(goal, dtype=float)
    theta = math.atan2(goal[1] - p[1], goal[0] - p[0])
    return AgentState(p, np.asarray(v, dtype=float), float(r), goal, float(v_pref), theta)


@dataclass
class WorldState:
    robot: AgentState
    obstacles: list
    t: float = 0.0
    dt: float = 0.25
    t_max: float = 25.0
    steps: int = 0
    done: bool = False
    d_start: float = field(default=0.0)

    def __post_init__(self):
        if not self.d_start:
            self.d_start = float(np.linalg.norm(self.robot.goal - self.robot.p))


@dataclass(frozen=True)
class JointObservation:
    robot_full: np.ndarray
    obstacles_obs: np.ndarray  # (n, 5)


@dataclass(frozen=True)
class StepEvents:
    reached_goal: bool
    collided: bool
    timed_out: bool
    d_min_step: float

    @property
    def terminal(self):
        return self.reached_goal or self.collided or self.timed_out

    @property
    def outcome(self):
        if self.collided:
            return "collision"
        if self.reached_goal:
            return "success"
        if self.timed_out:
            return "timeout"
        return None


# ---------------------------------------------------------------- actions


def decode_action(index):
    """Index 0 stops; 1..80 run direction-major over 16 headings x 5 speed fractions."""
    if isinstance(index, bool) or not 0 <= int(index) < N_ACTIONS or int(index) != index:
        raise InvalidActionError(f"action index {index!r} outside [0, {N_ACTIONS})")
    index = int(index)
    if index == 0:
        return 0.0, 0.0
    k, m = divmod(index - 1, N_SPEEDS)
    return k * math.pi / 8, (m + 1) * 0.2


def action_velocity(index, v_pref):
    direction, fraction = decode_action(index)
    speed = fraction * v_pref
    return np.array([speed * math.cos(direction), speed * math.sin(direction)])


# ---------------------------------------------------------------- geometry, events, reward


def min_clearance(world):
    if not world.obstacles:
        return math.inf
    rp, rr = world.robot.p, world.robot.r
    return min(math.hypot(o.p[0] - rp[0], o.p[1] - rp[1]) - (rr + o.r) for o in world.obstacles)


def classify(d_min, t, t_max, dist_to_goal, radius):
    """Terminal flags with precedence collision > goal > timeout."""
    collided = d_min < 0
    reached = not collided and dist_to_goal <= radius
    timed_out = not collided and not reached and t >= t_max
    return StepEvents(bool(reached), bool(collided), bool(timed_out), float(d_min))


def terminal_check(world):
    dist = math.dist(world.robot.p, world.robot.goal)
    return classify(min_clearance(world), world.t, world.t_max, dist, world.robot.r)


def reward(events, world, d_start_to_goal):
    d_min = events.d_min_step
    if events.collided:
        return -0.25
    if events.reached_goal:
        return 1.0
    if events.timed_out:
        remaining = math.dist(world.robot.p, world.robot.goal)
        return (d_start_to_goal - remaining) / d_start_to_goal * 0.5
    if 0 < d_min < DISCOMFORT_DIST:
        return -0.1 + d_min / 2
    return 0.0


# ---------------------------------------------------------------- dynamics


def static_policy(world, agent_index):
    return np.zeros(2)


def step(world, robot_action, obstacle_policy):
    """Advance one ``dt``; all obstacle velocities come from the pre-step state."""
    if world.done:
        raise UsageError("episode already terminated")
    velocities = [np.asarray(obstacle_policy(world, i), dtype=float) for i in range(len(world.obstacles))]
    robot = world.robot.moved(action_velocity(robot_action, world.robot.v_pref), world.dt)
    obstacles = [o.moved(v, world.dt) for o, v in zip(world.obstacles, velocities)]
    steps = world.steps + 1
    nxt = replace(world, robot=robot, obstacles=obstacles, steps=steps, t=steps * world.dt)
    events = terminal_check(nxt)
    nxt.done = events.terminal
    return nxt, events


def observe(world):
    obs = np.array([o.observable() for o in world.obstacles]).reshape(len(world.obstacles), OBSTACLE_DIM)
    return JointObservation(world.robot.full(), obs)


# ---------------------------------------------------------------- spawning


def _clear_of(p, others, radius, margin):
    return all(math.hypot(p[0] - q[0], p[1] - q[1]) >= radius + r + margin for q, r in others)


def _spawn(cfg, n_obstacles, rng, robot, sample):
    obstacles = []
    taken = [(robot.p, robot.r)]
    goals = [(robot.goal, robot.r)]
    for _ in range(n_obstacles):
        for _attempt in range(cfg.spawn_attempts):
            p, g = sample(rng)
            if _clear_of(p, taken, cfg.obstacle_radius, DISCOMFORT_DIST) and _clear_of(
                g, goals, cfg.obstacle_radius, DISCOMFORT_DIST
            ):
                break
        else:
            raise SpawnError(f"could not place obstacle {len(obstacles)} without overlap")
        obstacles.append(make_agent(p, g, cfg.obstacle_radius, cfg.v_pref))
        taken.append((p, cfg.obstacle_radius))
        goals.append((g, cfg.obstacle_radius))
    return WorldState(robot, obstacles, 0.0, cfg.dt, cfg.t_max)


def spawn_circle(n_obstacles, rng, cfg=None):
    cfg = cfg or SimConfig()
    R = cfg.r_circle
    robot = make_agent((0.0, -R), (0.0, R), cfg.robot_radius, cfg.v_pref)

    def sample(rng):
        angle = rng.uniform(0.0, 2 * math.pi) + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)
        rho = R + rng.uniform(-cfg.radial_jitter, cfg.radial_jitter)
        p = np.array([rho * math.cos(angle), rho * math.sin(angle)])
        return p, -p

    return _spawn(cfg, n_obstacles, rng, robot, sample)


def square_bounds(cfg):
    half = cfg.arena / 2
    band = (half - 2.0, half)  # |x| range of the two side bands
    return half, band


def spawn_square(n_obstacles, rng, cfg=None):
    cfg = cfg or SimConfig()
    half, (lo, hi) = square_bounds(cfg)
    y_lim = half - 1.0
    robot = make_agent((0.0, -y_lim), (0.0, y_lim), cfg.robot_radius, cfg.v_pref)

    def sample(rng):
        side = 1.0 if rng.random() < 0.5 else -1.0
        p = np.array([side * rng.uniform(lo, hi), rng.uniform(-y_lim, y_lim)])
        g = np.array([-side * rng.uniform(lo, hi), rng.uniform(-y_lim, y_lim)])
        return p, g

    return _spawn(cfg, n_obstacles, rng, robot, sample)


SPAWNERS = {"circle": spawn_circle, "square": spawn_square}


# ---------------------------------------------------------------- episode runner


class CrowdEnv:
    """Episode wrapper: ``reset`` then ``step(action)`` until ``done``."""

    def __init__(self, cfg=None, obstacle_policy=None, rng=None):
        self.cfg = cfg or SimConfig()
        if self.cfg.scenario not in SPAWNERS:
            raise ValueError(f"unknown scenario {self.cfg.scenario!r}")
        self.obstacle_policy = obstacle_policy or OrcaPolicy()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.world = None

    @property
    def n_obstacles(self):
        return self.cfg.n_obstacles

    def reset(self):
        self.world = SPAWNERS[self.cfg.scenario](self.cfg.n_obstacles, self.rng, self.cfg)
        return self.observation()

    def observation(self):
        obs = observe(self.world)
        return (obs.robot_full, obs.obstacles_obs)

    def step(self, action):
        world, events = step(self.world, action, self.obstacle_policy)
        self.world = world
        r = reward(events, world, world.d_start)
        return self.observation(), r, events.terminal, {"events": events, "truncated": False}


TRAJECTORY_FIELDS = ["episode", "step", "agent_id", "x", "y", "vx", "vy"]


def trajectory_rows(episode, worlds):
    """CSV rows for a sequence of world snapshots; agent 0 is the robot."""
    rows = []
    for world in worlds:
        for agent_id, a in enumerate([world.robot] + list(world.obstacles)):
            rows.append([episode, world.steps, agent_id, a.p[0], a.p[1], a.v[0], a.v[1]])
    return rows


def write_trajectory_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_FIELDS)
        for row in rows:
            w.writerow([row[0], row[1], row[2]] + [repr(float(x)) for x in row[3:]])

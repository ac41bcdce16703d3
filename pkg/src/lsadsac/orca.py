"""Optimal reciprocal collision avoidance for the crowd agents.

Each neighbour contributes one half-plane of admissible velocities; the new
velocity is the point of their intersection (clipped to the speed disk)
nearest the preferred velocity.  When the intersection is empty the
velocity minimising the largest constraint violation is used instead.
Scalar math is done on plain floats: numpy overhead dominates on 2-vectors.
"""

import math
from dataclasses import dataclass

import numpy as np

EPSILON = 1e-9


@dataclass(frozen=True)
class OrcaParams:
    time_horizon: float = 5.0
    neighbor_dist: float = 10.0
    max_speed: float | None = None  # None: use each agent's v_pref
    time_step: float = 0.25

    def __post_init__(self):
        for name in ("time_horizon", "neighbor_dist", "time_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OrcaParams.{name} must be positive")
        if self.max_speed is not None and not self.max_speed > 0:
            raise ValueError("OrcaParams.max_speed must be positive")


@dataclass(frozen=True)
class HalfPlane:
    """Admissible velocities ``v`` satisfy ``dot(v - point, normal) >= 0``."""

    point: tuple
    normal: tuple

    @property
    def direction(self):
        # boundary direction with the admissible side on its left
        return (self.normal[1], -self.normal[0])

    def violation(self, v):
        """Signed distance of ``v`` into the forbidden side (<= 0 means admissible)."""
        return -((v[0] - self.point[0]) * self.normal[0] + (v[1] - self.point[1]) * self.normal[1])


def _det(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1]


def _line(point, direction):
    return HalfPlane((point[0], point[1]), (-direction[1], direction[0]))


def orca_halfplanes(position, velocity, radius, neighbors, params=OrcaParams()):
    """Half-planes induced on one agent by its neighbours.

    ``neighbors`` is an iterable of ``(position, velocity, radius)``.  Each
    pair takes half the responsibility for avoiding the other.  Pairs that
    already overlap are resolved over a single time step.
    """
    px, py = float(position[0]), float(position[1])
    vx, vy = float(velocity[0]), float(velocity[1])
    inv_horizon = 1.0 / params.time_horizon
    planes = []
    for n_pos, n_vel, n_rad in neighbors:
        rpx, rpy = float(n_pos[0]) - px, float(n_pos[1]) - py
        rvx, rvy = vx - float(n_vel[0]), vy - float(n_vel[1])
        dist_sq = rpx * rpx + rpy * rpy
        combined = radius + float(n_rad)
        combined_sq = combined * combined

        if dist_sq > combined_sq:
            # vector from cutoff centre to relative velocity
            wx, wy = rvx - inv_horizon * rpx, rvy - inv_horizon * rpy
            w_len_sq = wx * wx + wy * wy
            dot1 = wx * rpx + wy * rpy
            if dot1 < 0.0 and dot1 * dot1 > combined_sq * w_len_sq:
                # project on the cutoff circle
                w_len = math.sqrt(w_len_sq)
                ux_, uy_ = wx / w_len, wy / w_len
                direction = (uy_, -ux_)
                scale = combined * inv_horizon - w_len
                ux, uy = scale * ux_, scale * uy_
            else:
                # project on a leg of the cone
                leg = math.sqrt(dist_sq - combined_sq)
                if _det((rpx, rpy), (wx, wy)) > 0.0:
                    direction = (
                        (rpx * leg - rpy * combined) / dist_sq,
                        (rpx * combined + rpy * leg) / dist_sq,
                    )
                else:
                    direction = (
                        -(rpx * leg + rpy * combined) / dist_sq,
                        -(-rpx * combined + rpy * leg) / dist_sq,
                    )
                dot2 = rvx * direction[0] + rvy * direction[1]
                ux, uy = dot2 * direction[0] - rvx, dot2 * direction[1] - rvy
        else:
            inv_step = 1.0 / params.time_step
            wx, wy = rvx - inv_step * rpx, rvy - inv_step * rpy
            w_len = math.hypot(wx, wy)
            if w_len < EPSILON:
                # coincident centres with equal velocity: push along an arbitrary fixed axis
                wx, wy, w_len = 1.0, 0.0, 1.0
            ux_, uy_ = wx / w_len, wy / w_len
            direction = (uy_, -ux_)
            scale = combined * inv_step - w_len
            ux, uy = scale * ux_, scale * uy_

        planes.append(_line((vx + 0.5 * ux, vy + 0.5 * uy), direction))
    return planes


# ---------------------------------------------------------------- 2-D linear program


def _lp1(lines, i, radius, opt, direction_opt):
    line = lines[i]
    d, p = line.direction, line.point
    dot = _dot(p, d)
    disc = dot * dot + radius * radius - _dot(p, p)
    if disc < 0.0:
        return None
    root = math.sqrt(disc)
    t_left, t_right = -dot - root, -dot + root
    for j in range(i):
        dj, pj = lines[j].direction, lines[j].point
        denom = _det(d, dj)
        numer = _det(dj, (p[0] - pj[0], p[1] - pj[1]))
        if abs(denom) <= EPSILON:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if _dot(opt, d) > 0.0 else t_left
    else:
        t = min(max(_dot(d, (opt[0] - p[0], opt[1] - p[1])), t_left), t_right)
    return (p[0] + t * d[0], p[1] + t * d[1])


def _lp2(lines, radius, opt, direction_opt):
    if direction_opt:
        result = (opt[0] * radius, opt[1] * radius)
    elif _dot(opt, opt) > radius * radius:
        n = math.hypot(*opt)
        result = (opt[0] / n * radius, opt[1] / n * radius)
    else:
        result = opt
    for i, line in enumerate(lines):
        if _det(line.direction, (line.point[0] - result[0], line.point[1] - result[1])) > 0.0:
            candidate = _lp1(lines, i, radius, opt, direction_opt)
            if candidate is None:
                return i, result
            result = candidate
    return len(lines), result


def _lp3(lines, begin, radius, result):
    distance = 0.0
    for i in range(begin, len(lines)):
        li = lines[i]
        di = li.direction
        if _det(di, (li.point[0] - result[0], li.point[1] - result[1])) > distance:
            projected = []
            for j in range(i):
                lj = lines[j]
                dj = lj.direction
                determinant = _det(di, dj)
                if abs(determinant) <= EPSILON:
                    if _dot(di, dj) > 0.0:
                        continue
                    point = (0.5 * (li.point[0] + lj.point[0]), 0.5 * (li.point[1] + lj.point[1]))
                else:
                    s = _det(dj, (li.point[0] - lj.point[0], li.point[1] - lj.point[1])) / determinant
                    point = (li.point[0] + s * di[0], li.point[1] + s * di[1])
                bx, by = dj[0] - di[0], dj[1] - di[1]
                n = math.hypot(bx, by)
                projected.append(_line(point, (bx / n, by / n)))
            previous = result
            fail, candidate = _lp2(projected, radius, (-di[1], di[0]), True)
            # numerical trouble only; keep the previous point
            result = previous if fail < len(projected) else candidate
            distance = _det(di, (li.point[0] - result[0], li.point[1] - result[1]))
    return result


def solve_velocity(pref_v, planes, max_speed):
    """Velocity nearest ``pref_v`` inside all half-planes and the speed disk.

    Falls back to minimising the largest violation when infeasible.
    """
    opt = (float(pref_v[0]), float(pref_v[1]))
    fail, result = _lp2(planes, max_speed, opt, False)
    if fail < len(planes):
        result = _lp3(planes, fail, max_speed, result)
    return np.array(result)


# ---------------------------------------------------------------- policy


def preferred_velocity(position, goal, v_pref, time_step):
    """Toward the goal at ``v_pref``, slowing so the goal is not overshot."""
    dx, dy = float(goal[0]) - float(position[0]), float(goal[1]) - float(position[1])
    dist = math.hypot(dx, dy)
    if dist < EPSILON:
        return (0.0, 0.0)
    speed = min(v_pref, dist / time_step)
    return (dx / dist * speed, dy / dist * speed)


def orca_velocity(agent, others, params=OrcaParams()):
    """New velocity for ``agent`` (an AgentState) avoiding ``others``."""
    max_speed = params.max_speed if params.max_speed is not None else agent.v_pref
    neighbors = []
    limit_sq = params.neighbor_dist**2
    for o in others:
        dx, dy = o.p[0] - agent.p[0], o.p[1] - agent.p[1]
        if dx * dx + dy * dy <= limit_sq:
            neighbors.append((o.p, o.v, o.r))
    planes = orca_halfplanes(agent.p, agent.v, agent.r, neighbors, params)
    pref = preferred_velocity(agent.p, agent.goal, agent.v_pref, params.time_step)
    v = solve_velocity(pref, planes, max_speed)
    speed = math.hypot(v[0], v[1])
    if speed > max_speed:
        v *= max_speed / speed
    return v


def orca_policy(world, agent_index, params=OrcaParams()):
    """Velocity of obstacle ``agent_index``; the robot counts as a neighbour."""
    agent = world.obstacles[agent_index]
    others = [world.robot] + [o for k, o in enumerate(world.obstacles) if k != agent_index]
    return orca_velocity(agent, others, params)


class OrcaPolicy:
    """Callable obstacle policy carrying its parameters."""

    def __init__(self, params=None):
        self.params = params or OrcaParams()

    def __call__(self, world, agent_index):
        params = self.params
        if params.time_step != world.dt:
            params = OrcaParams(params.time_horizon, params.neighbor_dist, params.max_speed, world.dt)
            self.params = params
        return orca_policy(world, agent_index, params)


def rollout(agents, params=OrcaParams(), max_steps=400):
    """Move ``agents`` (AgentStates) with ORCA until all reach their goals.

    Returns ``(min pairwise clearance, steps taken, all reached)``.
    """
    dt = params.time_step
    worst = math.inf
    for step_no in range(1, max_steps + 1):
        velocities = [orca_velocity(a, agents[:i] + agents[i + 1:], params) for i, a in enumerate(agents)]
        agents = [a.moved(v, dt) for a, v in zip(agents, velocities)]
        for i in range(len(agents)):
            for j in range(i + 1, len(agents)):
                a, b = agents[i], agents[j]
                worst = min(worst, math.hypot(a.p[0] - b.p[0], a.p[1] - b.p[1]) - a.r - b.r)
        if all(math.hypot(a.p[0] - a.goal[0], a.p[1] - a.goal[1]) < 1e-6 for a in agents):
            return worst, step_no, True
    return worst, max_steps, False


def circle_agents(n, rng, radius=4.0, agent_radius=0.3, v_pref=1.0, jitter=math.pi / 18):
    """``n`` agents evenly spaced (with angular jitter) on a circle, goals antipodal."""
    from .simulator import make_agent

    base = rng.uniform(0, 2 * math.pi)
    agents = []
    for k in range(n):
        angle = base + 2 * math.pi * k / n + rng.uniform(-jitter, jitter)
        p = np.array([radius * math.cos(angle), radius * math.sin(angle)])
        agents.append(make_agent(p, -p, agent_radius, v_pref))
    return agents

"""Environment-state encoders mapping a joint observation to a flat feature.

Attention family (``AW``, ``SA``, ``LSA``)::

    pair_i  = [s_r, o_i]                      (6 + 5 = 11)
    e_i     = relu(W_e (P pair_i))            (11 -> 150 -> 100)
    h_i     = W_h e_i            (AW)         (100 -> 50)
            = W_h [e_i, pair_i]  (SA, LSA)    (111 -> 50)
    a_i     = f_alpha(e_i)                    (100 -> 100 -> 1)
    S_o     = sum_i softmax(a)_i h_i  or  LSTM(softmax(a)_i h_i)

Relational graph (``RG``) embeds robot and obstacles to a common width,
builds a row-normalised relation matrix from pairwise features and runs
two residual propagation rounds before pooling.

All functions are batched: ``s_r`` is ``(B, 6)`` and ``obstacles`` is
``(B, n, 5)``.  Obstacle order is the spawn order.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError

ROBOT_FEATURE = 6
OBSTACLE_FEATURE = 5
PAIR_WIDTH = ROBOT_FEATURE + OBSTACLE_FEATURE
PROJ_WIDTH = 150
EMBED_WIDTH = 100
HIDDEN_WIDTH = 50  # interaction feature and LSTM hidden size
ATTENTION_HIDDEN = 100

VARIANTS = ("RG", "AW", "SA", "LSA")
ABLATION_MODES = (
    "rob",
    "rob+obs",
    "sum(rob+obs)",
    "rob+mlp(obs)",
    "mlp(rob+obs)",
    "lstm(rob+obs)",
    "rob+lstm(obs)",
)


# ---------------------------------------------------------------- featurisation


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def featurize(robot_full, obstacles):
    """Goal-rotated robot feature and obstacle states in the same frame.

    ``s_r = [d_goal, v_pref, v_x, v_y, r, theta]`` with the x axis pointing
    at the goal.  Obstacle positions become offsets from the robot; each
    obstacle keeps exactly its five observable values.
    """
    robot_full = np.asarray(robot_full, dtype=float)
    obstacles = np.asarray(obstacles, dtype=float)
    single = robot_full.ndim == 1
    if single:
        robot_full = robot_full[None]
        obstacles = obstacles[None]
    px, py, vx, vy, r, gx, gy, v_pref, theta = robot_full.T
    dx, dy = gx - px, gy - py
    rot = np.arctan2(dy, dx)
    c, s = np.cos(rot), np.sin(rot)
    s_r = np.stack(
        [np.hypot(dx, dy), v_pref, vx * c + vy * s, -vx * s + vy * c, r, _wrap(theta - rot)], axis=-1
    )
    c, s = c[:, None], s[:, None]
    ox = obstacles[..., 0] - px[:, None]
    oy = obstacles[..., 1] - py[:, None]
    ovx, ovy = obstacles[..., 2], obstacles[..., 3]
    o = np.stack(
        [ox * c + oy * s, -ox * s + oy * c, ovx * c + ovy * s, -ovx * s + ovy * c, obstacles[..., 4]],
        axis=-1,
    )
    if single:
        return s_r[0], o[0]
    return s_r, o


# ---------------------------------------------------------------- attention family

E_SPEC = [(PROJ_WIDTH, EMBED_WIDTH, "relu")]
ALPHA_SPEC = [(EMBED_WIDTH, ATTENTION_HIDDEN, "relu"), (ATTENTION_HIDDEN, 1, None)]


def h_spec(mode):
    if mode == "plain":
        return [(EMBED_WIDTH, HIDDEN_WIDTH, None)]
    if mode == "skip":
        return [(EMBED_WIDTH + PAIR_WIDTH, HIDDEN_WIDTH, None)]
    raise ConfigurationError(f"unknown interaction mode {mode!r}")


def pair_features(s_r, obstacles):
    """``[s_r, o_i]`` for every obstacle: ``(B, n, 11)``."""
    s_r = dc.as_tensor(s_r)
    obstacles = dc.as_tensor(obstacles)
    B, n = obstacles.shape[0], obstacles.shape[1]
    rep = dc.as_tensor(np.broadcast_to(s_r.data[:, None, :], (B, n, s_r.shape[-1])))
    if s_r.requires_grad:
        rep = dc.broadcast_to(dc.reshape(s_r, (B, 1, s_r.shape[-1])), (B, n, s_r.shape[-1]))
    return dc.concat([rep, obstacles], axis=-1)


def embed_pairwise(p, pair):
    """Shallow embedding ``e_i`` (width 100) of raw pair features (width 11)."""
    pair = dc.as_tensor(pair)
    if pair.shape[-1] != PAIR_WIDTH:
        raise ConfigurationError(f"pair feature width {pair.shape[-1]} != {PAIR_WIDTH}")
    projected = dc.linear(pair, p["proj.W"], p["proj.b"])
    return dc.mlp_forward(p, E_SPEC, projected, prefix="fe.")


def interaction_feature(p, e, pair, mode):
    if mode == "plain":
        x = dc.as_tensor(e)
    elif mode == "skip":
        x = dc.concat([e, pair], axis=-1)
    else:
        raise ConfigurationError(f"unknown interaction mode {mode!r}")
    spec = h_spec(mode)
    if x.shape[-1] != spec[0][0]:
        raise ConfigurationError(f"{mode} interaction expects width {spec[0][0]}, got {x.shape[-1]}")
    return dc.mlp_forward(p, spec, x, prefix="fh.")


@dataclass
class AttentionReport:
    scores: np.ndarray  # raw a_i, (B, n)
    weights: np.ndarray  # softmax over obstacles, (B, n)


def attention_scores(p, e):
    """Raw scores ``(B, n)`` and their softmax over obstacles, as tensors."""
    e = dc.as_tensor(e)
    raw = dc.mlp_forward(p, ALPHA_SPEC, e, prefix="fa.")
    raw = dc.reshape(raw, raw.shape[:-1])
    return raw, dc.softmax(raw, axis=-1)


def pool_obstacles(p, weighted, mode):
    """Pool ``(B, n, 50)`` weighted features into ``(B, 50)``."""
    weighted = dc.as_tensor(weighted)
    if weighted.shape[-2] == 0:
        raise dc.InvalidInputError("nothing to pool")
    if mode == "sum":
        return dc.sum(weighted, axis=-2)
    if mode == "lstm":
        return dc.lstm_forward(p, weighted, prefix="lstm.")
    raise ConfigurationError(f"unknown pooling mode {mode!r}")


ATTENTION_LAYOUT = {"AW": ("plain", "sum"), "SA": ("skip", "sum"), "LSA": ("skip", "lstm")}


def init_attention(store, prefix, variant, rng):
    interaction, pooling = ATTENTION_LAYOUT[variant]
    dc.init_linear(store, f"{prefix}proj", PAIR_WIDTH, PROJ_WIDTH, rng)
    dc.init_mlp(store, f"{prefix}fe.", E_SPEC, rng)
    dc.init_mlp(store, f"{prefix}fh.", h_spec(interaction), rng)
    dc.init_mlp(store, f"{prefix}fa.", ALPHA_SPEC, rng)
    if pooling == "lstm":
        dc.init_lstm(store, f"{prefix}lstm.", HIDDEN_WIDTH, HIDDEN_WIDTH, rng)


def encode_attention(p, s_r, obstacles, variant):
    """Return ``(S (B, 56), report)``; the report is ``None`` without obstacles."""
    if variant not in ATTENTION_LAYOUT:
        raise ConfigurationError(f"{variant!r} is not an attention encoder")
    interaction, pooling = ATTENTION_LAYOUT[variant]
    s_r = dc.as_tensor(s_r)
    obstacles = dc.as_tensor(obstacles)
    B, n = obstacles.shape[0], obstacles.shape[1]
    if n == 0:
        return dc.concat([s_r, np.zeros((B, HIDDEN_WIDTH))], axis=-1), None
    pair = pair_features(s_r, obstacles)
    e = embed_pairwise(p, pair)
    h = interaction_feature(p, e, pair, interaction)
    raw, weights = attention_scores(p, e)
    weighted = h * dc.reshape(weights, (B, n, 1))
    pooled = pool_obstacles(p, weighted, pooling)
    report = AttentionReport(raw.data.copy(), weights.data.copy())
    return dc.concat([s_r, pooled], axis=-1), report


# ---------------------------------------------------------------- relational graph


def rg_specs(width):
    return {
        "emb_r": [(ROBOT_FEATURE, width, "relu")],
        "emb_o": [(OBSTACLE_FEATURE, width, "relu")],
        "sim": [(2 * width, width, "relu"), (width, 1, None)],
    }


def init_rg(store, prefix, rng, width=ROBOT_FEATURE, ablation="rob+lstm(obs)", n_obstacles=1):
    for name, spec in rg_specs(width).items():
        dc.init_mlp(store, f"{prefix}{name}.", spec, rng)
    bound = 1.0 / np.sqrt(width)
    for layer in range(2):
        store.add(f"{prefix}W{layer}", rng.uniform(-bound, bound, size=(width, width)))
    if ablation in ("rob+lstm(obs)", "lstm(rob+obs)"):
        dc.init_lstm(store, f"{prefix}lstm.", width, HIDDEN_WIDTH, rng)
    elif ablation == "rob+mlp(obs)":
        dc.init_mlp(store, f"{prefix}pool.", [(max(n_obstacles, 1) * width, HIDDEN_WIDTH, "relu")], rng)
    elif ablation == "mlp(rob+obs)":
        dc.init_mlp(store, f"{prefix}pool.", [((n_obstacles + 1) * width, width + HIDDEN_WIDTH, "relu")], rng)
    elif ablation not in ABLATION_MODES:
        raise ConfigurationError(f"unknown pooling ablation {ablation!r}")


def relation_matrix(p, X):
    """Row-softmax of an MLP over all ordered pairs ``[X_i, X_j]``: ``(B, N+1, N+1)``."""
    B, m, w = X.shape
    xi = dc.broadcast_to(dc.reshape(X, (B, m, 1, w)), (B, m, m, w))
    xj = dc.broadcast_to(dc.reshape(X, (B, 1, m, w)), (B, m, m, w))
    logits = dc.mlp_forward(p, rg_specs(w)["sim"], dc.concat([xi, xj], axis=-1), prefix="sim.")
    return dc.softmax(dc.reshape(logits, (B, m, m)), axis=-1)


def propagate(A, X, weights):
    """``H <- relu(A H W_l) + H`` for each ``W_l`` in turn, starting from ``X``."""
    H = X
    for W in weights:
        H = dc.relu(dc.matmul(dc.matmul(A, H), W)) + H
    return H


def rg_features(p, s_r, obstacles):
    """Initial matrix ``X`` and propagated ``H``, both ``(B, N+1, width)``."""
    s_r = dc.as_tensor(s_r)
    obstacles = dc.as_tensor(obstacles)
    B, n = obstacles.shape[0], obstacles.shape[1]
    width = p["W0"].shape[0]
    specs = rg_specs(width)
    xr = dc.reshape(dc.mlp_forward(p, specs["emb_r"], s_r, prefix="emb_r."), (B, 1, width))
    if n:
        xo = dc.mlp_forward(p, specs["emb_o"], obstacles, prefix="emb_o.")
        X = dc.concat([xr, xo], axis=1)
    else:
        X = xr
    A = relation_matrix(p, X)
    return X, propagate(A, X, [p["W0"], p["W1"]])


def pool_ablation(p, H, mode):
    """Feature for one of the pooling ablations over the propagated matrix ``H``."""
    B, m, width = H.shape
    n = m - 1
    if mode == "rob":
        return H[:, 0, :]
    if mode == "rob+obs":
        return dc.reshape(H, (B, m * width))
    if mode == "sum(rob+obs)":
        return dc.sum(H, axis=1)
    if mode == "rob+lstm(obs)":
        if n == 0:
            return dc.concat([H[:, 0, :], np.zeros((B, HIDDEN_WIDTH))], axis=-1)
        return dc.concat([H[:, 0, :], dc.lstm_forward(p, H[:, 1:, :], prefix="lstm.")], axis=-1)
    if mode == "lstm(rob+obs)":
        return dc.lstm_forward(p, H, prefix="lstm.")
    if mode == "rob+mlp(obs)":
        if n == 0:
            return dc.concat([H[:, 0, :], np.zeros((B, HIDDEN_WIDTH))], axis=-1)
        flat = dc.reshape(H[:, 1:, :], (B, n * width))
        return dc.concat([H[:, 0, :], dc.mlp_forward(p, [(n * width, HIDDEN_WIDTH, "relu")], flat, "pool.")], axis=-1)
    if mode == "mlp(rob+obs)":
        flat = dc.reshape(H, (B, m * width))
        return dc.mlp_forward(p, [(m * width, width + HIDDEN_WIDTH, "relu")], flat, "pool.")
    raise ConfigurationError(f"unknown pooling ablation {mode!r}")


def encode_rg(p, s_r, obstacles, mode="rob+lstm(obs)"):
    _, H = rg_features(p, s_r, obstacles)
    return pool_ablation(p, H, mode)


def feature_width(variant, ablation="rob+lstm(obs)", n_obstacles=1, rg_width=ROBOT_FEATURE):
    if variant in ATTENTION_LAYOUT:
        return ROBOT_FEATURE + HIDDEN_WIDTH
    if variant != "RG":
        raise ConfigurationError(f"unknown encoder variant {variant!r}")
    m = n_obstacles + 1
    return {
        "rob": rg_width,
        "rob+obs": m * rg_width,
        "sum(rob+obs)": rg_width,
        "rob+mlp(obs)": rg_width + HIDDEN_WIDTH,
        "mlp(rob+obs)": rg_width + HIDDEN_WIDTH,
        "lstm(rob+obs)": HIDDEN_WIDTH,
        "rob+lstm(obs)": rg_width + HIDDEN_WIDTH,
    }[ablation]


# ---------------------------------------------------------------- encoder objects


class CrowdEncoder:
    """Binds a variant to parameter layout and forward pass.

    Observations are ``(robot_full (B, 9), obstacles (B, n, 5))``.  With
    ``robot_feature="learned"`` the raw 9-dim robot state goes through a
    trainable 9 -> 6 projection instead of the goal-rotated features.
    """

    def __init__(self, variant="LSA", ablation="rob+lstm(obs)", n_obstacles=1,
                 robot_feature="rotated", rg_width=ROBOT_FEATURE):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown encoder variant {variant!r}")
        if ablation not in ABLATION_MODES:
            raise ConfigurationError(f"unknown pooling ablation {ablation!r}")
        if robot_feature not in ("rotated", "learned"):
            raise ConfigurationError(f"unknown robot_feature {robot_feature!r}")
        self.variant = variant
        self.ablation = ablation
        self.n_obstacles = n_obstacles
        self.robot_feature = robot_feature
        self.rg_width = rg_width
        self.out_width = feature_width(variant, ablation, n_obstacles, rg_width)

    @property
    def has_attention(self):
        return self.variant in ATTENTION_LAYOUT

    def init(self, store, prefix, rng):
        if self.robot_feature == "learned":
            dc.init_linear(store, f"{prefix}robot", 9, ROBOT_FEATURE, rng)
        if self.variant == "RG":
            init_rg(store, prefix, rng, self.rg_width, self.ablation, self.n_obstacles)
        else:
            init_attention(store, prefix, self.variant, rng)

    def robot_input(self, p, robot_full, s_r):
        if self.robot_feature == "learned":
            return dc.linear(robot_full, p["robot.W"], p["robot.b"])
        return s_r

    def forward(self, p, obs):
        """Encoded state ``(B, out_width)`` and an attention report (or ``None``)."""
        robot_full, obstacles = obs
        s_r, o = featurize(robot_full, obstacles)
        s_r = self.robot_input(p, robot_full, s_r)
        if self.variant == "RG":
            return encode_rg(p, s_r, o, self.ablation), None
        return encode_attention(p, s_r, o, self.variant)


class IdentityEncoder:
    """Pass-through used by the tabular harness; observation is ``(x,)``."""

    has_attention = False

    def __init__(self, width):
        self.out_width = width

    def init(self, store, prefix, rng):
        pass

    def forward(self, p, obs):
        return dc.as_tensor(obs[0]), None

"""Run configuration: an INI file with ``[run]``, ``[sim]`` and ``[dsac]`` sections.

Every key is optional; missing keys take the dataclass defaults.  The
resolved configuration is written back out in the same format so a run
directory always records exactly what produced it.
"""

import configparser
import dataclasses
import hashlib
import io
import math
import typing
from dataclasses import dataclass, field

from .dsac import DsacConfig
from .encoders import ABLATION_MODES, ROBOT_FEATURE, VARIANTS
from .errors import ConfigurationError
from .simulator import SPAWNERS, SimConfig


@dataclass
class RunSettings:
    encoder: str = "LSA"
    ablation: str = "rob+lstm(obs)"
    robot_feature: str = "rotated"
    rg_width: int = ROBOT_FEATURE
    episodes: int = 2000
    seed: int = 0
    checkpoint_every: int = 100
    eval_episodes: int = 100
    out: str = "runs/default"


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    sim: SimConfig = field(default_factory=SimConfig)
    dsac: DsacConfig = field(default_factory=DsacConfig)

    def validate(self):
        if self.run.encoder not in VARIANTS:
            raise ConfigurationError(f"run.encoder: {self.run.encoder!r} not one of {', '.join(VARIANTS)}")
        if self.run.ablation not in ABLATION_MODES:
            raise ConfigurationError(f"run.ablation: unknown pooling ablation {self.run.ablation!r}")
        if self.run.robot_feature not in ("rotated", "learned"):
            raise ConfigurationError(f"run.robot_feature: {self.run.robot_feature!r} not rotated|learned")
        if self.sim.scenario not in SPAWNERS:
            raise ConfigurationError(f"sim.scenario: {self.sim.scenario!r} not one of {', '.join(SPAWNERS)}")
        for key in ("episodes", "eval_episodes"):
            if getattr(self.run, key) < 0:
                raise ConfigurationError(f"run.{key}: must be >= 0")
        if self.run.checkpoint_every <= 0:
            raise ConfigurationError("run.checkpoint_every: must be positive")
        if self.sim.n_obstacles < 0:
            raise ConfigurationError("sim.n_obstacles: must be >= 0")
        for key in ("dt", "t_max", "r_circle", "arena", "robot_radius", "obstacle_radius", "v_pref"):
            if not getattr(self.sim, key) > 0:
                raise ConfigurationError(f"sim.{key}: must be positive")
        return self

    def to_text(self):
        parser = configparser.ConfigParser()
        for section in ("run", "sim", "dsac"):
            obj = getattr(self, section)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self, sections=("run", "sim", "dsac"), skip=("out", "episodes", "eval_episodes")):
        text = "\n".join(
            f"{s}.{f.name}={_format(getattr(getattr(self, s), f.name))}"
            for s in sections
            for f in dataclasses.fields(getattr(self, s))
            if f.name not in skip
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def model_digest(self):
        """Hash of the fields that fix the parameter layout."""
        run, dsac = self.run, self.dsac
        parts = [run.encoder, run.ablation, run.robot_feature, run.rg_width, dsac.hidden, dsac.n_actions]
        if run.encoder == "RG" and run.ablation in ("rob+obs", "rob+mlp(obs)", "mlp(rob+obs)"):
            parts.append(self.sim.n_obstacles)
        return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "auto"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(section, name, hint, text):
    text = text.strip()
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        if hint is tuple:
            return tuple(int(v) for v in text.strip("()").split(",") if v.strip())
        if type(None) in typing.get_args(hint):  # optional float, "auto" means None
            return None if text.lower() in ("auto", "none", "") else float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{section}.{name}: cannot parse {text!r}") from None


def parse_config(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigurationError(f"config syntax: {err}") from None
    values = {}
    classes = {"run": RunSettings, "sim": SimConfig, "dsac": DsacConfig}
    for section in parser.sections():
        if section not in classes:
            raise ConfigurationError(f"unknown config section [{section}]")
    for section, cls in classes.items():
        known = typing.get_type_hints(cls)
        kwargs = {}
        if parser.has_section(section):
            for key, text_value in parser[section].items():
                if key not in known:
                    raise ConfigurationError(f"{section}.{key}: unknown key")
                kwargs[key] = _parse(section, key, known[key], text_value)
        try:
            values[section] = cls(**kwargs)
        except ValueError as err:
            raise ConfigurationError(f"{section}: {err}") from None
    return RunConfig(**values).validate()


def load_config(path=None):
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as err:
        raise ConfigurationError(f"cannot read config {path}: {err.strerror}") from None


def with_overrides(cfg, seed=None, episodes=None, encoder=None, obstacles=None, scenario=None, out=None):
    run = dataclasses.replace(
        cfg.run,
        **{k: v for k, v in (("seed", seed), ("episodes", episodes), ("encoder", encoder), ("out", out)) if v is not None},
    )
    sim = dataclasses.replace(
        cfg.sim, **{k: v for k, v in (("n_obstacles", obstacles), ("scenario", scenario)) if v is not None}
    )
    return RunConfig(run, sim, dataclasses.replace(cfg.dsac)).validate()

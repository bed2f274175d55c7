"""Experiment description and its flat ``section.key = value`` text format.

Example::

    # lines starting with '#' are comments
    env.num_devices = 3
    env.data_quality = 2, 1, 1
    agent.episodes = 500
    experiment.scheme = ddqn
    experiment.seeds = 0, 1, 2, 3, 4
    sweep.parameter = env.data_quality.1
    sweep.values = 1, 1.5, 2, 2.5, 3

Sections are ``env`` (environment constants), ``agent`` (DDQN settings),
``tabular`` (tabular Q-learning settings), ``experiment`` and ``sweep``.
Sequences are comma separated; ``none`` is the null value. A per-device
entry is addressed with a 1-based suffix, e.g. ``env.data_quality.2``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .baselines import TabularConfig
from .ddqn import AgentConfig
from .env import Config

SCHEMES = ("ddqn", "greedy", "random", "tabular")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    env: Config = field(default_factory=Config)
    agent: AgentConfig = field(default_factory=AgentConfig)
    tabular: TabularConfig = field(default_factory=TabularConfig)
    scheme: str = "ddqn"
    seeds: tuple = (0,)
    output: str | None = None
    window: int = 50
    jobs: int = 1
    sweep_parameter: str = "env.data_quality.1"
    sweep_values: tuple = (1.0, 1.5, 2.0, 2.5, 3.0)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEMES)}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "sweep_values", tuple(float(v) for v in self.sweep_values))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.env.discount != self.agent.discount:
            raise ConfigError("env.discount and agent.discount differ")

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    def with_parameter(self, name: str, value) -> "ExperimentSpec":
        """Copy with one dotted parameter (``env.x``, ``env.x.2``, ``agent.y`` ...) changed."""
        return apply_overrides(self, {name: value})


_SECTIONS = {"env": Config, "agent": AgentConfig, "tabular": TabularConfig}
_EXPERIMENT_KEYS = ("scheme", "seeds", "output", "window", "jobs")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() == "none":
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_scalar(p) for p in text.split(",") if p.strip())
    return _parse_scalar(text)


def parse_text(text: str) -> dict:
    """``{dotted key: value}`` from the file format; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or value == "":
            raise ConfigError(f"line {lineno}: empty key or value")
        out[key] = _parse_value(value)
    return out


def _init_fields(cls):
    return {f.name for f in fields(cls) if f.init}


def _collapse_uniform(env: dict):
    """Uniform per-device values follow a change of device count."""
    for k, v in env.items():
        if isinstance(v, tuple) and k != "reward_weights" and len(v) != env["num_devices"] and len(set(v)) == 1:
            env[k] = v[0]


def apply_overrides(spec: ExperimentSpec, values: dict) -> ExperimentSpec:
    """Apply dotted ``key -> value`` settings in order and rebuild (and validate) the spec."""
    sections = {
        name: {k: getattr(getattr(spec, name), k) for k in _init_fields(cls)}
        for name, cls in _SECTIONS.items()
    }
    top = {k: getattr(spec, k) for k in _EXPERIMENT_KEYS}
    top["sweep_parameter"], top["sweep_values"] = spec.sweep_parameter, spec.sweep_values
    for key, value in values.items():
        if isinstance(value, str):
            value = _parse_value(value)
        parts = key.split(".")
        if parts[0] in _SECTIONS:
            sec = sections[parts[0]]
            if len(parts) not in (2, 3) or parts[1] not in sec:
                raise ConfigError(f"unknown parameter {key!r}")
            if len(parts) == 3:
                current = sec[parts[1]]
                n = sections["env"]["num_devices"] if parts[0] == "env" else None
                if not isinstance(current, tuple):
                    current = (current,) * (n or 1)
                try:
                    i = int(parts[2]) - 1
                    if not 0 <= i < len(current):
                        raise ValueError
                except ValueError:
                    raise ConfigError(f"bad element index in {key!r}") from None
                current = list(current)
                current[i] = value
                value = tuple(current)
            elif parts[0] != "env" and isinstance(sec[parts[1]], tuple) and not isinstance(value, tuple):
                value = (value,)
            sec[parts[1]] = value
            if key == "env.num_devices":
                _collapse_uniform(sec)
        elif parts[0] == "experiment" and len(parts) == 2 and parts[1] in _EXPERIMENT_KEYS:
            top[parts[1]] = value
        elif key == "sweep.parameter":
            top["sweep_parameter"] = value
        elif key == "sweep.values":
            top["sweep_values"] = value if isinstance(value, tuple) else (value,)
        else:
            raise ConfigError(f"unknown parameter {key!r}")
    _collapse_uniform(sections["env"])
    # one discount factor: setting either side sets both
    for mine, other in (("env", "agent"), ("agent", "env")):
        if f"{mine}.discount" in values and f"{other}.discount" not in values:
            sections[other]["discount"] = sections[mine]["discount"]
    seeds = top["seeds"]
    top["seeds"] = seeds if isinstance(seeds, tuple) else (seeds,)
    if top["output"] is not None:
        top["output"] = str(top["output"])
    top["scheme"], top["sweep_parameter"] = str(top["scheme"]), str(top["sweep_parameter"])
    try:
        env = Config(**sections["env"])
        agent = AgentConfig(**sections["agent"])
        tabular = TabularConfig(**sections["tabular"])
        return ExperimentSpec(env=env, agent=agent, tabular=tabular, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_spec(path=None, overrides: dict | None = None) -> ExperimentSpec:
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_text(fh.read()))
    values.update(overrides or {})
    return apply_overrides(ExperimentSpec(), values)


def dump_spec(spec: ExperimentSpec) -> str:
    """Every parameter, one per line, in the file format."""
    lines = []
    for name, cls in _SECTIONS.items():
        obj = getattr(spec, name)
        for f in fields(cls):
            if f.init:
                lines.append(f"{name}.{f.name} = {_format_value(getattr(obj, f.name))}")
    for k in _EXPERIMENT_KEYS:
        lines.append(f"experiment.{k} = {_format_value(getattr(spec, k))}")
    lines.append(f"sweep.parameter = {spec.sweep_parameter}")
    lines.append(f"sweep.values = {_format_value(spec.sweep_values)}")
    return "\n".join(lines) + "\n"

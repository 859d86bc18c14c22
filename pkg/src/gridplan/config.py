"""Experiment configuration: flat INI files with typed, validated sections.

Every key has a default, so a config file only states what it changes.
`load_config` returns an ExperimentConfig plus nothing hidden: the full
resolved key set (defaults included) is recoverable with `resolved_items`
and embedded in every report, making runs diffable and reproducible.

Sections and keys:

  [experiment]  name, mode, seeds, episodes, output_dir, algos, workers,
                densities, variants
  [map]         family, width, height, seed, count, file
  [dynamics]    enabled, density_target, mutation_period, dynamics_seed
  [reward]      w_p, w_c, w_s, eta, beta, r_goal, r_collision, r_step
  [network]     embed_channels, hidden_size, heads, downsample, seq_len,
                attention_scale, use_spatial_attention, use_long_branch
  [exploration] eps_min, eps_max, decay_rate, temp_initial, temp_decay,
                temp_floor
  [replay]      capacity, alpha_similarity, priority_floor,
                priority_exponent, beta_initial, uniform_priorities
  [train]       learning_rate, gamma, batch_size, total_steps, warmup_steps,
                sync_period, grad_clip_norm, train_every, optimizer,
                episode_step_limit, randomize_starts, reward_scale,
                eval_every, eval_episodes, eval_start, target_sr
  [rrt]         step_size, goal_bias, max_iter, rewire_radius,
                collision_resolution
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .gridworld import DynamicsConfig, RewardConfig
from .planners import RrtConfig
from .policy import ExplorationSchedule
from .trainer import TrainConfig

MODES = ("train", "eval-static", "eval-dynamic", "ablation", "density-sweep")
MAP_FAMILIES = ("maze", "simple", "complex", "spiral", "open", "file")
VARIANTS = ("full", "A1", "A2", "A3")
CLASSICAL_ALGOS = ("astar", "dijkstra", "bfs", "rrt", "rrt_star",
                   "adaptive_astar")
AGENT_ALGO = "qagent"
KNOWN_ALGOS = (AGENT_ALGO,) + CLASSICAL_ALGOS


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _opt_int(text: str) -> int | None:
    return int(text) if text.strip() else None


def _opt_float(text: str) -> float | None:
    return float(text) if text.strip() else None


# (parser, default-as-string); defaults here mirror the dataclass defaults
# of the objects each section configures.
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (str, "experiment"),
        "mode": (str, "eval-static"),
        "seeds": (_int_list, "0"),
        "episodes": (int, "200"),
        "output_dir": (str, ""),
        "algos": (_str_list, AGENT_ALGO),
        "workers": (int, "1"),
        "densities": (_float_list, "0.05,0.15,0.25,0.35"),
        "variants": (_str_list, ",".join(VARIANTS)),
    },
    "map": {
        "family": (str, "simple"),
        "width": (int, "20"),
        "height": (int, "20"),
        "seed": (int, "0"),
        "count": (int, "1"),
        "file": (str, ""),
    },
    "dynamics": {
        "enabled": (_bool, "false"),
        "density_target": (float, "0.15"),
        "mutation_period": (int, "10"),
        "dynamics_seed": (int, "0"),
    },
    "reward": {
        "w_p": (float, "0.4"),
        "w_c": (float, "0.3"),
        "w_s": (float, "0.3"),
        "eta": (float, "1.0"),
        "beta": (float, "0.5"),
        "r_goal": (float, "200.0"),
        "r_collision": (float, "5.0"),
        "r_step": (float, "0.2"),
    },
    "network": {
        "embed_channels": (int, "8"),
        "hidden_size": (int, "64"),
        "heads": (int, "4"),
        "downsample": (int, "2"),
        "seq_len": (int, "10"),
        "attention_scale": (_opt_float, ""),
        "use_spatial_attention": (_bool, "true"),
        "use_long_branch": (_bool, "true"),
    },
    "exploration": {
        "eps_min": (float, "0.1"),
        "eps_max": (float, "0.9"),
        "decay_rate": (float, "1e-4"),
        "temp_initial": (float, "1.0"),
        "temp_decay": (float, "0.99"),
        "temp_floor": (float, "0.05"),
    },
    "replay": {
        "capacity": (int, "50000"),
        "alpha_similarity": (float, "0.5"),
        "priority_floor": (float, "0.01"),
        "priority_exponent": (float, "0.6"),
        "beta_initial": (float, "0.4"),
        "uniform_priorities": (_bool, "false"),
    },
    "train": {
        "learning_rate": (float, "1e-3"),
        "gamma": (float, "0.99"),
        "batch_size": (int, "64"),
        "total_steps": (int, "20000"),
        "warmup_steps": (int, "1000"),
        "sync_period": (int, "500"),
        "grad_clip_norm": (float, "10.0"),
        "train_every": (int, "4"),
        "optimizer": (str, "sgd"),
        "episode_step_limit": (_opt_int, ""),
        "randomize_starts": (_bool, "true"),
        "reward_scale": (float, "1.0"),
        "eval_every": (int, "1000"),
        "eval_episodes": (int, "100"),
        "eval_start": (int, "2000"),
        "target_sr": (_opt_float, ""),
    },
    "rrt": {
        "step_size": (float, "2.0"),
        "goal_bias": (float, "0.05"),
        "max_iter": (int, "5000"),
        "rewire_radius": (float, "4.0"),
        "collision_resolution": (float, "0.1"),
    },
}


@dataclass
class MapSpec:
    family: str = "simple"
    width: int = 20
    height: int = 20
    seed: int = 0
    count: int = 1
    file: str = ""


@dataclass
class NetworkSettings:
    """Network shape knobs; height/width come from the map at build time."""

    embed_channels: int = 8
    hidden_size: int = 64
    heads: int = 4
    downsample: int = 2
    seq_len: int = 10
    attention_scale: float | None = None
    use_spatial_attention: bool = True
    use_long_branch: bool = True


@dataclass
class HarnessSettings:
    """Training-time evaluation cadence and optional early stopping."""

    eval_every: int = 1000
    eval_episodes: int = 100
    eval_start: int = 2000
    target_sr: float | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "eval-static"
    seeds: list[int] = field(default_factory=lambda: [0])
    episodes: int = 200
    output_dir: str = ""
    algos: list[str] = field(default_factory=lambda: [AGENT_ALGO])
    workers: int = 1
    densities: list[float] = field(
        default_factory=lambda: [0.05, 0.15, 0.25, 0.35])
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    map_spec: MapSpec = field(default_factory=MapSpec)
    dynamics_enabled: bool = False
    dynamics: DynamicsConfig = field(
        default_factory=lambda: DynamicsConfig(density_target=0.15))
    reward: RewardConfig = field(default_factory=RewardConfig)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    exploration: ExplorationSchedule = field(
        default_factory=ExplorationSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    harness: HarnessSettings = field(default_factory=HarnessSettings)
    rrt: RrtConfig = field(default_factory=RrtConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"[experiment] mode: {self.mode!r} is not one "
                              f"of {'/'.join(MODES)}")
        if not self.seeds:
            raise ConfigError("[experiment] seeds: need at least one seed")
        if self.episodes < 1:
            raise ConfigError("[experiment] episodes: must be >= 1")
        if self.workers < 1:
            raise ConfigError("[experiment] workers: must be >= 1")
        for algo in self.algos:
            if algo not in KNOWN_ALGOS:
                raise ConfigError(f"[experiment] algos: unknown algorithm "
                                  f"{algo!r}; known: {', '.join(KNOWN_ALGOS)}")
        for variant in self.variants:
            if variant not in VARIANTS:
                raise ConfigError(f"[experiment] variants: unknown variant "
                                  f"{variant!r}; known: {', '.join(VARIANTS)}")
        for d in self.densities:
            if not 0.0 <= d <= 1.0:
                raise ConfigError(f"[experiment] densities: {d} outside [0, 1]")
        if self.map_spec.family not in MAP_FAMILIES:
            raise ConfigError(f"[map] family: {self.map_spec.family!r} is not "
                              f"one of {'/'.join(MAP_FAMILIES)}")
        if self.map_spec.family == "file" and not self.map_spec.file:
            raise ConfigError("[map] file: required when family = file")
        if self.map_spec.count < 1:
            raise ConfigError("[map] count: must be >= 1")
        if min(self.map_spec.width, self.map_spec.height) < 4:
            raise ConfigError("[map] width/height: maps must be at least 4x4")
        if self.network.seq_len != self.train.seq_len:
            # single source of truth: the network window drives training
            self.train.seq_len = self.network.seq_len
        if not self.output_dir:
            self.output_dir = f"runs/{self.name}"


def _build_section(cls, values: dict, section: str, skip=()):
    kwargs = {k: v for k, v in values.items() if k not in skip}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_values(values: dict[str, dict]) -> ExperimentConfig:
    """Build an ExperimentConfig from fully-typed per-section value dicts."""
    exp = values["experiment"]
    trn = dict(values["train"])
    harness = HarnessSettings(
        eval_every=trn.pop("eval_every"),
        eval_episodes=trn.pop("eval_episodes"),
        eval_start=trn.pop("eval_start"),
        target_sr=trn.pop("target_sr"),
    )
    if harness.eval_every < 1 or harness.eval_episodes < 1:
        raise ConfigError("[train] eval_every/eval_episodes: must be >= 1")
    rep = dict(values["replay"])
    trn["replay_capacity"] = rep.pop("capacity")
    trn.update(rep)
    dyn = dict(values["dynamics"])
    enabled = dyn.pop("enabled")
    net = values["network"]
    trn["seq_len"] = net["seq_len"]
    return ExperimentConfig(
        name=exp["name"], mode=exp["mode"], seeds=exp["seeds"],
        episodes=exp["episodes"], output_dir=exp["output_dir"],
        algos=exp["algos"], workers=exp["workers"],
        densities=exp["densities"], variants=exp["variants"],
        map_spec=_build_section(MapSpec, values["map"], "map"),
        dynamics_enabled=enabled,
        dynamics=_build_section(DynamicsConfig, dyn, "dynamics"),
        reward=_build_section(RewardConfig, values["reward"], "reward"),
        network=_build_section(NetworkSettings, net, "network"),
        exploration=_build_section(ExplorationSchedule,
                                   values["exploration"], "exploration"),
        train=_build_section(TrainConfig, trn, "train"),
        harness=harness,
        rrt=_build_section(RrtConfig, values["rrt"], "rrt"),
    )


def parse_config_text(text: str, overrides: dict | None = None
                      ) -> ExperimentConfig:
    """Parse INI text; `overrides` maps 'section.key' to raw string values."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; known: "
                              f"{', '.join(SCHEMA)}")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] {key}: unknown key; known: "
                                  f"{', '.join(SCHEMA[section])}")

    raw: dict[str, dict[str, str]] = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    for section in parser.sections():
        for key, value in parser[section].items():
            raw[section][key] = value
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"override {dotted!r} does not match any "
                              f"config key")
        raw[section][key] = value

    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except ValueError as exc:
                raise ConfigError(
                    f"[{section}] {key}: cannot parse "
                    f"{raw[section][key]!r} ({exc})") from exc
    return config_from_values(values)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def resolved_items(cfg: ExperimentConfig) -> list[tuple[str, str, str]]:
    """Every schema key with its resolved value, defaults included."""
    sources = {
        "experiment": {
            "name": cfg.name, "mode": cfg.mode, "seeds": cfg.seeds,
            "episodes": cfg.episodes, "output_dir": cfg.output_dir,
            "algos": cfg.algos, "workers": cfg.workers,
            "densities": cfg.densities, "variants": cfg.variants,
        },
        "map": cfg.map_spec.__dict__,
        "dynamics": {"enabled": cfg.dynamics_enabled,
                     **cfg.dynamics.__dict__},
        "reward": cfg.reward.__dict__,
        "network": cfg.network.__dict__,
        "exploration": cfg.exploration.__dict__,
        "replay": {
            "capacity": cfg.train.replay_capacity,
            "alpha_similarity": cfg.train.alpha_similarity,
            "priority_floor": cfg.train.priority_floor,
            "priority_exponent": cfg.train.priority_exponent,
            "beta_initial": cfg.train.beta_initial,
            "uniform_priorities": cfg.train.uniform_priorities,
        },
        "train": {**{k: getattr(cfg.train, k) for k in SCHEMA["train"]
                     if hasattr(cfg.train, k)},
                  **cfg.harness.__dict__},
        "rrt": cfg.rrt.__dict__,
    }
    items = []
    for section, keys in SCHEMA.items():
        for key in keys:
            items.append((section, key, _fmt(sources[section][key])))
    return items


def resolved_text(cfg: ExperimentConfig) -> str:
    """INI rendering of the fully resolved config (round-trips via parse)."""
    lines = []
    current = None
    for section, key, value in resolved_items(cfg):
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

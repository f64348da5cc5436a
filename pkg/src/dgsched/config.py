"""Training configuration: presets for each algorithm/architecture pair.

The linear presets reproduce the controlled-comparison table (split-epoch
critic/actor updates, large minibatches, high rollout counts); the NN
presets scale network width and batch sizes with the fleet. Config files
are INI-style with one section per algorithm; unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

ALGORITHMS = ("dgpg", "mappo", "ippo")
ARCHS = ("linear", "mlp")


@dataclass
class TrainConfig:
    algorithm: str = "dgpg"
    arch: str = "linear"
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 1e-3
    lr_decay: str = "linear"  # linear | exp | none
    lr_decay_end: float = 0.9  # progress at which linear decay bottoms out
    lr_final_scale: float = 0.01
    entropy_coef: float = 0.01
    entropy_decay: str = "exp"  # exp | none
    entropy_final: float = 1e-4
    critic_epochs: int = 20
    actor_epochs: int = 3
    minibatch_size: int = 10_000
    rollouts_per_episode: int = 24
    parallel_envs: int = 4
    episodes: int = 200
    alpha_schedule: str = "paper"  # paper | const
    alpha_const: float = 0.0
    huber_delta: float = 10.0
    grad_clip_norm: float = 10.0
    return_normalization: bool = False
    hidden_dim: int = 128
    embed_dim: int = 16
    eval_every: int = 10
    n_validation: int = 8

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def linear_preset(algorithm: str) -> TrainConfig:
    """Controlled-comparison settings shared by all three methods."""
    cfg = TrainConfig(
        algorithm=algorithm,
        arch="linear",
        lr=1e-3,
        lr_decay="linear",
        clip_eps=0.2,
        critic_epochs=20,
        actor_epochs=3,
        minibatch_size=10_000,
        grad_clip_norm=10.0,
        huber_delta=10.0,
        parallel_envs=4,
        rollouts_per_episode=24,
    )
    if algorithm == "dgpg":
        return cfg.replace(
            episodes=200,
            entropy_coef=0.01,
            entropy_decay="exp",
            alpha_schedule="paper",
            return_normalization=False,
        )
    # the baselines get 2.5x the training budget and a fixed entropy bonus
    return cfg.replace(
        episodes=500,
        entropy_coef=0.005,
        entropy_decay="none",
        alpha_schedule="const",
        alpha_const=0.0,
        return_normalization=True,
    )


# per-scale NN settings: hidden, minibatch, rollouts, parallel envs, clip
_NN_SCALE = {
    5: (128, 256, 12, 4, 0.2),
    10: (128, 512, 12, 4, 0.2),
    20: (128, 512, 12, 4, 0.2),
    50: (256, 1024, 8, 4, 0.4),
    100: (512, 2048, 6, 2, 0.4),
    200: (1024, 2048, 4, 1, 0.4),
}


def nn_preset(n_servers: int, algorithm: str = "dgpg") -> TrainConfig:
    if n_servers not in _NN_SCALE:
        raise ValueError(f"no NN preset for {n_servers} servers")
    hidden, minibatch, rollouts, envs, clip = _NN_SCALE[n_servers]
    return TrainConfig(
        algorithm=algorithm,
        arch="mlp",
        lr=3e-4,
        lr_decay="exp",
        clip_eps=clip,
        entropy_coef=0.02,
        entropy_decay="exp",
        critic_epochs=4,
        actor_epochs=4,
        minibatch_size=minibatch,
        rollouts_per_episode=rollouts,
        parallel_envs=envs,
        episodes=200,
        alpha_schedule="paper" if algorithm == "dgpg" else "const",
        grad_clip_norm=0.5,
        return_normalization=False,
        hidden_dim=hidden,
        embed_dim=16,
    )


def preset(algorithm: str, arch: str, n_servers: int) -> TrainConfig:
    if arch == "linear":
        return linear_preset(algorithm)
    return nn_preset(n_servers, algorithm)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {raw!r} for {name}")
    return raw


def load_config_overrides(path: str | Path) -> dict[str, dict]:
    """Parse a key = value config file with [common] and per-algorithm sections.

    Returns {section: {field: value}}. Unknown sections or keys are errors.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    allowed_sections = ("common",) + ALGORITHMS
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in allowed_sections:
            raise ValueError(f"unknown config section [{section}]")
        vals = {}
        for key, raw in parser.items(section):
            if key not in _FIELD_TYPES:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            vals[key] = _parse_value(key, raw)
        out[section] = vals
    return out


def apply_overrides(cfg: TrainConfig, overrides: dict[str, dict]) -> TrainConfig:
    merged: dict = {}
    merged.update(overrides.get("common", {}))
    merged.update(overrides.get(cfg.algorithm, {}))
    merged.pop("algorithm", None)
    return cfg.replace(**merged) if merged else cfg

"""Scenario files: one JSON document per reproducible episode blueprint."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .env import ClusterEnv, Scenario
from .fleet import SCALES, SERVER_TYPE_BY_NAME, sample_fleet
from .workload import calibrate_base_rate


def make_scenario(seed: int, scale_name: str, target_util: float | None = None) -> Scenario:
    """Build a scenario from a seed: sample a fleet and calibrate its rate."""
    scale = SCALES[scale_name]
    rng = np.random.default_rng(seed)
    fleet = tuple(sample_fleet(scale.n_servers, rng))
    rho = (
        target_util
        if target_util is not None
        else 0.5 * (scale.target_util[0] + scale.target_util[1])
    )
    base_rate = calibrate_base_rate(list(fleet), rho)
    return Scenario(seed=seed, scale=scale, fleet=fleet, base_rate=base_rate)


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "seed": int(s.seed),
        "scale": s.scale.name,
        "fleet": [spec.instance_name for spec in s.fleet],
        "base_rate": s.base_rate,
    }


def scenario_from_dict(d: dict) -> Scenario:
    scale = SCALES[d["scale"]]
    fleet = tuple(SERVER_TYPE_BY_NAME[name] for name in d["fleet"])
    return Scenario(
        seed=int(d["seed"]), scale=scale, fleet=fleet, base_rate=float(d["base_rate"])
    )


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n")


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def load_scenario_dir(directory: str | Path) -> list[Scenario]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no scenario files in {directory}")
    return [load_scenario(p) for p in paths]


def make_env(s: Scenario, slot_count: int | None = None) -> ClusterEnv:
    return ClusterEnv(s, slot_count=slot_count)

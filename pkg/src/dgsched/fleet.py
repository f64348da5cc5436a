"""Heterogeneous server fleet: instance catalog, fleet sampling, capacity clustering.

The catalog models 12 AWS-style instance types spanning three hardware
generations. Efficiency factors (eta_cpu, eta_mem) capture
performance-per-watt differences; job completion time scales as
duration / eta_cpu of the hosting server.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CPU = 0  # resource dimension indices
MEM = 1
N_RESOURCES = 2

# Normalizers for observations: fleet-wide capacity maxima.
MAX_VCPUS = 96.0
MAX_MEM_GB = 384.0


@dataclass(frozen=True)
class ServerSpec:
    """One server instance type."""

    instance_name: str
    generation: int  # 1, 2 or 3
    vcpus: float
    mem_gb: float
    eta_cpu: float
    eta_mem: float
    sample_weight: float

    def __post_init__(self):
        if self.vcpus <= 0 or self.mem_gb <= 0:
            raise ValueError(f"{self.instance_name}: capacities must be positive")
        if not (0 < self.eta_cpu <= 1.08):
            raise ValueError(f"{self.instance_name}: eta_cpu out of range")
        if not (0 < self.eta_mem <= 0.96):
            raise ValueError(f"{self.instance_name}: eta_mem out of range")

    @property
    def capacity(self) -> np.ndarray:
        return np.array([self.vcpus, self.mem_gb])


SERVER_TYPES: tuple[ServerSpec, ...] = (
    ServerSpec("m4.8xlarge", 1, 32, 128, 0.70, 0.68, 0.10),
    ServerSpec("t3.2xlarge", 1, 16, 64, 0.72, 0.70, 0.03),
    ServerSpec("t3a.2xlarge", 1, 16, 64, 0.75, 0.72, 0.02),
    ServerSpec("m5.8xlarge", 2, 32, 128, 0.95, 0.93, 0.20),
    ServerSpec("c5.18xlarge", 2, 64, 128, 0.98, 0.93, 0.10),
    ServerSpec("c5.12xlarge", 2, 48, 96, 0.97, 0.93, 0.08),
    ServerSpec("r5.8xlarge", 2, 32, 256, 0.87, 0.92, 0.09),
    ServerSpec("r5.6xlarge", 2, 24, 192, 0.84, 0.93, 0.07),
    ServerSpec("m5n.12xlarge", 2, 48, 192, 0.96, 0.92, 0.06),
    ServerSpec("m6i.8xlarge", 3, 32, 128, 1.06, 0.95, 0.15),
    ServerSpec("c5n.18xlarge", 3, 64, 256, 1.08, 0.95, 0.08),
    ServerSpec("c6i.32xlarge", 3, 96, 384, 1.08, 0.96, 0.02),
)

SERVER_TYPE_BY_NAME: dict[str, ServerSpec] = {s.instance_name: s for s in SERVER_TYPES}

_TYPE_WEIGHTS = np.array([s.sample_weight for s in SERVER_TYPES])


def sample_fleet(
    n: int,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
) -> list[ServerSpec]:
    """Draw n server specs i.i.d. from the catalog distribution, then shuffle.

    The shuffle decorrelates server index from instance type so policies
    cannot exploit positional patterns. Result order is the server index
    order.
    """
    if n < 1:
        raise ValueError("fleet size must be >= 1")
    w = _TYPE_WEIGHTS if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    idx = rng.choice(len(SERVER_TYPES), size=n, p=w)
    rng.shuffle(idx)
    return [SERVER_TYPES[i] for i in idx]


def fleet_capacities(fleet: list[ServerSpec]) -> np.ndarray:
    """(N, 2) matrix of per-server (vcpus, mem_gb)."""
    return np.array([[s.vcpus, s.mem_gb] for s in fleet])


def cluster_partition(fleet: list[ServerSpec], k_clusters: int) -> list[list[int]]:
    """Group servers into k contiguous capacity-sorted clusters of equal size.

    Servers are sorted by (vcpus, mem_gb) descending and chunked; within a
    cluster, capacities are therefore similar. Deterministic for a given
    fleet (ties keep fleet order).
    """
    n = len(fleet)
    if n % k_clusters != 0:
        raise ValueError(f"fleet size {n} not divisible by {k_clusters} clusters")
    size = n // k_clusters
    order = sorted(range(n), key=lambda i: (-fleet[i].vcpus, -fleet[i].mem_gb, i))
    return [order[c * size : (c + 1) * size] for c in range(k_clusters)]


@dataclass(frozen=True)
class ScaleConfig:
    """One experimental scale: fleet size, action clustering, episode shape."""

    name: str
    n_servers: int
    n_clusters: int
    episode_len: int = 3000
    arrivals_end: int = 2000
    target_util: tuple[float, float] = (0.80, 0.85)

    def __post_init__(self):
        if self.n_servers % self.n_clusters != 0:
            raise ValueError("n_servers must be divisible by n_clusters")

    @property
    def servers_per_cluster(self) -> int:
        return self.n_servers // self.n_clusters

    @property
    def obs_mode(self) -> str:
        # Cluster-level sufficient statistics replace raw per-server state
        # once the fleet is large enough (N >= 200).
        return "compressed" if self.n_servers >= 200 else "raw"


SCALES: dict[str, ScaleConfig] = {
    c.name: c
    for c in (
        ScaleConfig("tiny", 2, 2),
        ScaleConfig("small", 5, 5),
        ScaleConfig("compact", 10, 10),
        ScaleConfig("standard", 20, 20),
        ScaleConfig("medium", 50, 25),
        ScaleConfig("heavy", 100, 25),
        ScaleConfig("xlarge", 200, 40),
    )
}


def scale_by_servers(n: int) -> ScaleConfig:
    for c in SCALES.values():
        if c.n_servers == n:
            return c
    raise KeyError(f"no built-in scale with {n} servers")

"""Analytical guidance: capacity-weighted reference state and per-agent signals.

The reference state is the solution of the capacity-weighted load-balancing
program (minimize sum x^2/mu subject to workload conservation), which
equalizes utilization rates across servers for each resource dimension.
Each agent's guidance coefficient projects the deviation from that
reference onto the dimensions the agent's placement actually touches, so
the signal is free of other agents' sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .fleet import ServerSpec, fleet_capacities

CONSERVATION_TOL = 1e-9


@dataclass
class ReferenceState:
    """Target utilization matrix from the load-balancing equilibrium."""

    values: np.ndarray  # (N, K)
    total_load: np.ndarray  # (K,)


def reference_state(
    fleet: list[ServerSpec] | np.ndarray, total_load: np.ndarray
) -> ReferenceState:
    """Capacity-weighted equilibrium: x[i,k] = mu[i,k] / sum_j mu[j,k] * C[k].

    Pure function of capacities and aggregate load; carries no dependence
    on any policy.
    """
    mu = _capacities(fleet)
    c = np.asarray(total_load, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("capacities must be positive")
    if np.any(c < 0):
        raise ValueError("total load must be non-negative")
    col_sums = mu.sum(axis=0)
    if np.any(col_sums <= 0):
        raise ValueError("zero total capacity in some resource dimension")
    return ReferenceState(values=mu * (c / col_sums), total_load=c)


def deviation(x: np.ndarray, ref: ReferenceState) -> float:
    """Half squared distance between system state and reference."""
    x = np.asarray(x, dtype=float)
    if x.shape != ref.values.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.values.shape}")
    d = x - ref.values
    return 0.5 * float(np.sum(d * d))


def influence_dense(n_servers: int, server: int, demand: np.ndarray) -> np.ndarray:
    """Dense (N, K) form of a local influence vector: demand at one server."""
    z = np.zeros((n_servers, len(demand)))
    z[server] = demand
    return z


def guidance_coefficient(
    x: np.ndarray, ref: ReferenceState, demand: np.ndarray, server: int
) -> float:
    """Deviation gradient projected onto one agent's influence.

    Equals sum_k demand[k] * (x[server,k] - ref[server,k]); positive when
    the chosen server is overloaded in the dimensions the job consumes.
    Reads no other agent's action.
    """
    return float(np.dot(np.asarray(demand, dtype=float), x[server] - ref.values[server]))


def load_imbalance(x: np.ndarray, fleet: list[ServerSpec] | np.ndarray) -> float:
    """Capacity-normalized quadratic load spread: sum_{i,k} x[i,k]^2 / mu[i,k]."""
    mu = _capacities(fleet)
    if np.any(mu <= 0):
        raise ValueError("capacities must be positive")
    x = np.asarray(x, dtype=float)
    return float(np.sum(x * x / mu))


def alignment_inner_product(
    x: np.ndarray, ref: ReferenceState, fleet: list[ServerSpec] | np.ndarray
) -> float:
    """Inner product of the imbalance gradient with the direction to the reference.

    Strictly negative for any workload-conserving x != ref (Cauchy-Schwarz),
    zero at the reference: moving toward the reference always reduces
    imbalance.
    """
    mu = _capacities(fleet)
    x = np.asarray(x, dtype=float)
    gap = np.abs(x.sum(axis=0) - ref.values.sum(axis=0))
    if np.any(gap > CONSERVATION_TOL):
        raise ValueError(f"workload conservation violated by {gap.max():g}")
    return float(np.sum((2.0 * x / mu) * (ref.values - x)))


def _capacities(fleet) -> np.ndarray:
    if isinstance(fleet, np.ndarray):
        return fleet
    return fleet_capacities(fleet)


@dataclass
class RunningNorm:
    """EMA standardizer with clipping, for scale-free guidance signals."""

    mean: float = 0.0
    var: float = 1.0
    momentum: float = 0.99
    clip: float = 3.0

    def update(self, raw: float) -> float:
        d = raw - self.mean
        self.mean = self.momentum * self.mean + (1.0 - self.momentum) * raw
        self.var = self.momentum * self.var + (1.0 - self.momentum) * d * d
        z = (raw - self.mean) / np.sqrt(self.var + 1e-8)
        return float(np.clip(z, -self.clip, self.clip))

    def update_batch(self, raw: np.ndarray) -> np.ndarray:
        """Vectorized equivalent of sequential update() calls (bit-identical)."""
        raw = np.asarray(raw, dtype=float)
        if raw.size == 0:
            return raw.copy()
        m = self.momentum
        b, a = [1.0 - m], [1.0, -m]
        zi_mean = np.array([m * self.mean])
        means, _ = lfilter(b, a, raw, zi=zi_mean)
        prev_means = np.concatenate(([self.mean], means[:-1]))
        dsq = (raw - prev_means) ** 2
        zi_var = np.array([m * self.var])
        variances, _ = lfilter(b, a, dsq, zi=zi_var)
        self.mean = float(means[-1])
        self.var = float(variances[-1])
        z = (raw - means) / np.sqrt(variances + 1e-8)
        return np.clip(z, -self.clip, self.clip)


def normalize_signal(raw: float, stats: RunningNorm) -> float:
    """Update running statistics with one observation and return its z-score."""
    return stats.update(raw)


def batch_coefficients(
    util: np.ndarray,
    caps: np.ndarray,
    total_load: np.ndarray,
    demands: np.ndarray,
    servers: np.ndarray,
) -> np.ndarray:
    """Guidance coefficients for all agents acting in one step.

    Equivalent to guidance_coefficient(util, reference_state(caps,
    total_load), demands[i], servers[i]) for each i, evaluated at the
    shared pre-placement state.
    """
    ratio = np.asarray(total_load, dtype=float) / caps.sum(axis=0)
    gap = util[servers] - caps[servers] * ratio
    return (gap * demands).sum(axis=1)

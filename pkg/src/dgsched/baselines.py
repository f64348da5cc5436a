"""Non-learned reference policies: global Best-Fit and Random."""

from __future__ import annotations

import numpy as np

from .env import ClusterEnv
from .workload import Job


def bestfit_place(env: ClusterEnv, job: Job) -> int:
    """Greedy single-job placement over the whole fleet.

    Ranks servers by committed load (running utilization plus queued
    demand) so concurrently dispatched jobs do not stack onto one target:
    pick the fullest server with committed headroom for the job, and fall
    back to the least committed-loaded server when none fits. Ties break to
    the lowest index.
    """
    committed = env.util + env.queued_demand
    demand = np.array([job.cpu_req, job.mem_req])
    return _bestfit_from_committed(committed, env.caps, demand)


def bestfit_placements(env: ClusterEnv) -> np.ndarray:
    """Best-Fit placements for the whole buffer, committed-load aware.

    Sequential over the buffer: each placement commits its demand so later
    jobs in the same step see it.
    """
    committed = env.util + env.queued_demand
    caps = env.caps
    demands = env.buffer_demands
    out = np.empty(len(demands), dtype=np.int64)
    for i, d in enumerate(demands):
        sid = _bestfit_from_committed(committed, caps, d)
        committed[sid] += d
        out[i] = sid
    return out


def _bestfit_from_committed(
    committed: np.ndarray, caps: np.ndarray, demand: np.ndarray
) -> int:
    frac = (committed / caps).mean(axis=1)
    fits = (committed[:, 0] + demand[0] <= caps[:, 0]) & (
        committed[:, 1] + demand[1] <= caps[:, 1]
    )
    idx = np.flatnonzero(fits)
    if idx.size:
        # argmax takes the first maximum, so ties break to the lowest index
        return int(idx[np.argmax(frac[idx])])
    return int(np.argmin(frac))


def random_place(act_dim: int, rng: np.random.Generator) -> int:
    """Uniform draw over the action space (server or cluster index)."""
    if act_dim < 1:
        raise ValueError("action space must be non-empty")
    return int(rng.integers(0, act_dim))


def random_actions(env: ClusterEnv, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, env.act_dim, env.n_buffered)


def heuristic_episode(
    env: ClusterEnv,
    kind: str,
    rng: np.random.Generator | None = None,
    use_fast: bool | None = None,
) -> float:
    """Run one full episode under a heuristic; returns mean per-step reward."""
    if kind not in ("bestfit", "random"):
        raise ValueError(f"unknown heuristic {kind!r}")
    from . import fastpath

    if use_fast is None:
        use_fast = fastpath.HAVE_NUMBA and rng is None
    if use_fast and rng is None:
        out = fastpath.run_fast_episode(
            env,
            fastpath.POLICY_BESTFIT if kind == "bestfit" else fastpath.POLICY_RANDOM,
            action_seed=env.scenario.seed + 1,
            collect=False,
        )
        return float(out["rewards"].mean())
    if kind == "random" and rng is None:
        rng = np.random.default_rng(env.scenario.seed + 1)
    total = 0.0
    while env.t < env.episode_len:
        if kind == "bestfit":
            placements = bestfit_placements(env)
        else:
            placements = env.resolve_actions(random_actions(env, rng))
        r, _ = env.step(placements)
        total += r
    return total / env.episode_len

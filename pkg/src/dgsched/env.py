"""Discrete-time heterogeneous cloud-cluster simulator.

One step processes, in order: placement of buffered jobs into server
queues, FIFO admission while both resource dimensions fit, execution
(remaining work drops by the host's CPU efficiency; finished jobs release
resources), arrival of the next step's jobs, and the shared reward.

The whole arrival/job stream is pre-generated at reset from the scenario
seed, so replaying a scenario reproduces the identical stream bit-for-bit
regardless of the policy being evaluated.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import workload
from .fleet import MAX_MEM_GB, MAX_VCPUS, ScaleConfig, ServerSpec, cluster_partition
from .workload import Job, arrival_rate, sample_job_batch

QUEUE_OBS_CLIP = 50.0
REWARD_W_QUEUE = 1.0
REWARD_W_ENERGY = 20.0
OVERLOAD_THRESHOLD = 0.9
HEAVY_MARGIN = 0.1

# smallest possible demand per dimension (workload clip floors); servers with
# less headroom than this can skip their admission scan outright
_MIN_DEMAND = (
    workload.CPU_REQ_RANGE_MEM[0],
    min(workload.MEM_RANGE_CPU[0], workload.MEM_RANGE_MEM[0]),
)
ADMISSION_SCAN_LIMIT = 128

RAW_FEATURES_PER_SERVER = 7
COMPRESSED_FEATURES_PER_CLUSTER = 28


@dataclass(frozen=True)
class Scenario:
    """A reproducible episode blueprint: seed, scale, fleet and arrival rate."""

    seed: int
    scale: ScaleConfig
    fleet: tuple[ServerSpec, ...]
    base_rate: float


@dataclass(slots=True)
class StepInfo:
    """Per-step observables needed by the guidance machinery and tests."""

    t: int
    pre_util: np.ndarray  # (N, 2) utilization before this step's placements
    total_load: np.ndarray  # (2,) aggregate workload (running + queued + buffered)
    servers: np.ndarray  # (A,) chosen server per buffered job
    demands: np.ndarray  # (A, 2) per-job demand vectors
    n_arrived: int
    n_admitted: int
    n_completed: int


class ClusterEnv:
    """Simulator instance owning its state and random stream. Not shareable."""

    def __init__(self, scenario: Scenario, slot_count: int | None = None):
        self.scenario = scenario
        scale = scenario.scale
        self.n_servers = scale.n_servers
        self.episode_len = scale.episode_len
        self.arrivals_end = scale.arrivals_end
        self.obs_mode = scale.obs_mode
        self.slot_count = (
            slot_count if slot_count is not None else workload.agent_slot_count(scale)
        )

        fleet = scenario.fleet
        if len(fleet) != self.n_servers:
            raise ValueError("fleet length does not match scale")
        self.fleet = list(fleet)
        self.caps = np.array([[s.vcpus, s.mem_gb] for s in fleet])
        self.eta_cpu = np.array([s.eta_cpu for s in fleet])
        self.eta_mem = np.array([s.eta_mem for s in fleet])
        self.c_total = float(self.caps.sum())
        self.clusters = cluster_partition(self.fleet, scale.n_clusters)
        self.cluster_idx = np.array(self.clusters)  # (K, S)
        self._singleton_map = self.cluster_idx[:, 0].copy()
        self.act_dim = scale.n_clusters

        if self.obs_mode == "raw":
            self.obs_dim = (
                RAW_FEATURES_PER_SERVER * self.n_servers + 2 * self.slot_count + 4
            )
        else:
            self.obs_dim = COMPRESSED_FEATURES_PER_CLUSTER * scale.n_clusters + 10

        # static observation columns: efficiencies and normalized capacities
        self._server_static = np.empty((self.n_servers, RAW_FEATURES_PER_SERVER))
        self._server_static[:, 3] = self.eta_cpu
        self._server_static[:, 4] = self.eta_mem
        self._server_static[:, 5] = self.caps[:, 0] / MAX_VCPUS
        self._server_static[:, 6] = self.caps[:, 1] / MAX_MEM_GB

        self.reset()

    # ------------------------------------------------------------------
    # lifecycle

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.scenario.seed)
        self._pregenerate_arrivals()

        n = self.n_servers
        self.t = 0
        self.util = np.zeros((n, 2))
        self.queues: list[deque[int]] = [deque() for _ in range(n)]
        self.queue_len = np.zeros(n, dtype=np.int64)
        self.queued_demand = np.zeros((n, 2))

        cap = self.total_jobs
        self._run_rem = np.empty(cap)
        self._run_dem = np.empty((cap, 2))
        self._run_sid = np.empty(cap, dtype=np.int64)
        self._run_jid = np.empty(cap, dtype=np.int64)
        self.n_running = 0
        self.n_completed = 0

        self._buf_start = 0
        self._buf_end = int(self.arrival_counts[0]) if self.arrivals_end > 0 else 0

    def _pregenerate_arrivals(self) -> None:
        t_grid = np.arange(self.arrivals_end)
        noise = self.rng.normal(0.0, workload.RATE_NOISE_STD, self.arrivals_end)
        tide = 1.0 + workload.TIDAL_AMPLITUDE * np.sin(
            2.0 * np.pi * t_grid / workload.TIDAL_PERIOD
        )
        rates = self.scenario.base_rate * np.maximum(workload.RATE_FLOOR, tide + noise)
        self.arrival_counts = self.rng.poisson(rates)
        total = int(self.arrival_counts.sum())

        kind, cpu, mem, dur = sample_job_batch(self.rng, total)
        # jobs that cannot fit any server in some dimension are resampled so
        # the arrival rate is preserved
        max_cap = self.caps.max(axis=0)
        bad = np.flatnonzero((cpu > max_cap[0]) | (mem > max_cap[1]))
        while bad.size:
            k2, c2, m2, d2 = sample_job_batch(self.rng, bad.size)
            kind[bad], cpu[bad], mem[bad], dur[bad] = k2, c2, m2, d2
            bad = bad[(c2 > max_cap[0]) | (m2 > max_cap[1])]

        self.total_jobs = total
        self.job_kind = kind
        self.job_demand = np.column_stack([cpu, mem]) if total else np.empty((0, 2))
        self.job_duration = dur
        starts = np.zeros(self.arrivals_end + 1, dtype=np.int64)
        np.cumsum(self.arrival_counts, out=starts[1:])
        self.arrival_starts = starts
        self.job_arrival_t = np.repeat(t_grid, self.arrival_counts)

    # ------------------------------------------------------------------
    # inspection

    @property
    def n_buffered(self) -> int:
        return self._buf_end - self._buf_start

    @property
    def buffer_demands(self) -> np.ndarray:
        return self.job_demand[self._buf_start : self._buf_end]

    @property
    def buffer_job_ids(self) -> np.ndarray:
        return np.arange(self._buf_start, self._buf_end)

    def buffer_jobs(self) -> list[Job]:
        return [self._job(j) for j in range(self._buf_start, self._buf_end)]

    def _job(self, jid: int) -> Job:
        return Job(
            id=jid,
            kind=int(self.job_kind[jid]),
            cpu_req=float(self.job_demand[jid, 0]),
            mem_req=float(self.job_demand[jid, 1]),
            duration_base=float(self.job_duration[jid]),
            arrival_t=int(self.job_arrival_t[jid]),
        )

    def total_load(self) -> np.ndarray:
        """Aggregate allocated workload C: the column sums of the utilization.

        Queued and buffered demand are excluded: the load-balancing
        reference built from C must redistribute the load that actually
        occupies servers, so it stays reachable under backlog instead of
        drifting above every server's capacity.
        """
        return self.util.sum(axis=0)

    def job_location_counts(self) -> dict[str, int]:
        """Job conservation accounting across the four containers."""
        return {
            "buffered": self.n_buffered,
            "queued": int(self.queue_len.sum()),
            "running": self.n_running,
            "completed": self.n_completed,
        }

    # ------------------------------------------------------------------
    # dynamics

    def step(self, placements) -> tuple[float, StepInfo]:
        """Advance one timestep. placements[i] is the server for buffered job i."""
        if self.t >= self.episode_len:
            raise RuntimeError("episode is over")
        a = self.n_buffered
        placements = np.asarray(placements, dtype=np.int64)
        if placements.shape != (a,):
            raise ValueError(f"expected {a} placements, got shape {placements.shape}")
        if a and (placements.min() < 0 or placements.max() >= self.n_servers):
            raise ValueError("server index out of range")

        demands = self.buffer_demands
        info_pre_util = self.util.copy()
        info_total_load = info_pre_util.sum(axis=0)

        # 1. route buffered jobs to their servers' local queues
        jids = range(self._buf_start, self._buf_end)
        for jid, sid in zip(jids, placements):
            self.queues[sid].append(jid)
        if a:
            np.add.at(self.queue_len, placements, 1)
            np.add.at(self.queued_demand, placements, demands)
        self._buf_start = self._buf_end

        # 2. admission in FIFO order while both dimensions fit; a queued job
        # too large for the current headroom stays put without blocking the
        # jobs behind it. The scan examines at most ADMISSION_SCAN_LIMIT
        # non-fitting jobs per server per step so steps stay O(1) in queue
        # length under overload.
        n_admitted = 0
        min_d0, min_d1 = _MIN_DEMAND
        for sid in np.flatnonzero(self.queue_len):
            cap0, cap1 = self.caps[sid]
            u0, u1 = self.util[sid]
            if cap0 - u0 < min_d0 or cap1 - u1 < min_d1:
                continue  # nothing can possibly fit
            q = self.queues[sid]
            kept: list[int] = []
            admitted_here = 0
            misses = 0
            while q and misses < ADMISSION_SCAN_LIMIT:
                jid = q.popleft()
                d0 = self.job_demand[jid, 0]
                d1 = self.job_demand[jid, 1]
                if u0 + d0 <= cap0 and u1 + d1 <= cap1:
                    u0 += d0
                    u1 += d1
                    self.queued_demand[sid, 0] -= d0
                    self.queued_demand[sid, 1] -= d1
                    k = self.n_running
                    self._run_rem[k] = self.job_duration[jid]
                    self._run_dem[k, 0] = d0
                    self._run_dem[k, 1] = d1
                    self._run_sid[k] = sid
                    self._run_jid[k] = jid
                    self.n_running += 1
                    admitted_here += 1
                else:
                    kept.append(jid)
                    misses += 1
            if kept:
                q.extendleft(reversed(kept))
            if admitted_here:
                n_admitted += admitted_here
                self.util[sid, 0] = u0
                self.util[sid, 1] = u1
                self.queue_len[sid] = len(q)
                if not q:
                    self.queued_demand[sid] = 0.0  # cancel float drift
                else:
                    np.maximum(self.queued_demand[sid], 0.0, out=self.queued_demand[sid])

        # 3. execution: remaining work drops by the host's CPU efficiency
        n_completed = 0
        k = self.n_running
        if k:
            rem = self._run_rem[:k]
            rem -= self.eta_cpu[self._run_sid[:k]]
            done = rem <= 0
            n_completed = int(done.sum())
            if n_completed:
                sids = self._run_sid[:k][done]
                np.subtract.at(self.util, sids, self._run_dem[:k][done])
                keep = ~done
                kk = k - n_completed
                self._run_rem[:kk] = rem[keep]
                self._run_dem[:kk] = self._run_dem[:k][keep]
                self._run_sid[:kk] = self._run_sid[:k][keep]
                self._run_jid[:kk] = self._run_jid[:k][keep]
                self.n_running = kk
                self.n_completed += n_completed
                # guard against accumulated float error on fully-idle servers
                np.maximum(self.util, 0.0, out=self.util)

        # 4. arrivals for the next step
        self.t += 1
        n_arrived = 0
        if self.t < self.arrivals_end:
            n_arrived = int(self.arrival_counts[self.t])
            self._buf_end = int(self.arrival_starts[self.t + 1])

        r = self.reward()
        info = StepInfo(
            t=self.t - 1,
            pre_util=info_pre_util,
            total_load=info_total_load,
            servers=placements,
            demands=demands,
            n_arrived=n_arrived,
            n_admitted=n_admitted,
            n_completed=n_completed,
        )
        return r, info

    def reward(self) -> float:
        """Shared reward: queue penalty plus efficiency-weighted energy penalty."""
        queue_pen = (self.n_buffered + int(self.queue_len.sum())) / self.n_servers
        energy_pen = float((self.util.sum(axis=1) / self.eta_cpu).sum()) / self.c_total
        return -(REWARD_W_QUEUE * queue_pen + REWARD_W_ENERGY * energy_pen)

    # ------------------------------------------------------------------
    # action space

    def resolve_action(self, action: int, demand: np.ndarray) -> int:
        """Map a cluster action to a concrete server via within-cluster best-fit."""
        return within_cluster_bestfit(
            self.util, self.caps, self.cluster_idx[action], demand
        )

    def resolve_actions(self, actions: np.ndarray) -> np.ndarray:
        if self.cluster_idx.shape[1] == 1:  # singleton clusters: direct lookup
            return self._singleton_map[np.asarray(actions, dtype=np.int64)]
        demands = self.buffer_demands
        out = np.empty(len(actions), dtype=np.int64)
        for i, act in enumerate(actions):
            out[i] = within_cluster_bestfit(
                self.util, self.caps, self.cluster_idx[act], demands[i]
            )
        return out

    # ------------------------------------------------------------------
    # observations

    def _server_block(self) -> np.ndarray:
        block = self._server_static
        block[:, 0] = self.util[:, 0] / self.caps[:, 0]
        block[:, 1] = self.util[:, 1] / self.caps[:, 1]
        block[:, 2] = np.minimum(self.queue_len, QUEUE_OBS_CLIP) / QUEUE_OBS_CLIP
        return block

    def _base_obs(self) -> np.ndarray:
        """Shared observation prefix: system block + task block + tail zeros."""
        s = self.slot_count
        base = np.zeros(self.obs_dim)
        demands = self.buffer_demands
        a = min(len(demands), s)
        if self.obs_mode == "raw":
            nblk = RAW_FEATURES_PER_SERVER * self.n_servers
            base[:nblk] = self._server_block().ravel()
            if a:
                task = base[nblk : nblk + 2 * a].reshape(a, 2)
                task[:, 0] = demands[:a, 0] / workload.MAX_CPU_REQ
                task[:, 1] = demands[:a, 1] / workload.MAX_MEM_REQ
        else:
            nblk = COMPRESSED_FEATURES_PER_CLUSTER * self.act_dim
            base[:nblk] = self._compressed_block().ravel()
            if len(demands):
                c = demands[:, 0] / workload.MAX_CPU_REQ
                m = demands[:, 1] / workload.MAX_MEM_REQ
                base[nblk : nblk + 6] = [
                    c.mean(), c.std(), c.max(), m.mean(), m.std(), m.max(),
                ]
        base[-2] = self.t / self.episode_len
        return base

    def _compressed_block(self) -> np.ndarray:
        """(K, 28) cluster-level sufficient statistics, all within [0, 1.1]."""
        idx = self.cluster_idx  # (K, S)
        k, s = idx.shape
        cpu_fr = (self.util[:, 0] / self.caps[:, 0])[idx]
        mem_fr = (self.util[:, 1] / self.caps[:, 1])[idx]
        qn = np.minimum(self.queue_len, QUEUE_OBS_CLIP)[idx] / QUEUE_OBS_CLIP

        out = np.empty((k, COMPRESSED_FEATURES_PER_CLUSTER))
        quants = (0.0, 0.25, 0.5, 0.75, 1.0)
        out[:, 0:5] = np.quantile(cpu_fr, quants, axis=1).T
        out[:, 5] = cpu_fr.mean(axis=1)
        out[:, 6] = cpu_fr.std(axis=1)
        out[:, 7:12] = np.quantile(mem_fr, quants, axis=1).T
        out[:, 12] = mem_fr.mean(axis=1)
        out[:, 13] = mem_fr.std(axis=1)

        # joint utilization shape: correlation (mapped to [0,1]) and the mix
        # of cpu-heavy / memory-heavy / balanced servers
        cc = cpu_fr - cpu_fr.mean(axis=1, keepdims=True)
        mc = mem_fr - mem_fr.mean(axis=1, keepdims=True)
        denom = np.sqrt((cc * cc).sum(axis=1) * (mc * mc).sum(axis=1))
        corr = np.where(denom > 0, (cc * mc).sum(axis=1) / np.maximum(denom, 1e-300), 0.0)
        out[:, 14] = 0.5 * (corr + 1.0)
        cpu_heavy = cpu_fr > mem_fr + HEAVY_MARGIN
        mem_heavy = mem_fr > cpu_fr + HEAVY_MARGIN
        out[:, 15] = cpu_heavy.mean(axis=1)
        out[:, 16] = mem_heavy.mean(axis=1)
        out[:, 17] = 1.0 - out[:, 15] - out[:, 16]

        out[:, 18] = np.minimum(qn.sum(axis=1) / s, 1.0)
        out[:, 19] = qn.max(axis=1)
        out[:, 20] = qn.mean(axis=1)
        out[:, 21] = qn.std(axis=1)
        out[:, 22] = (qn > 0).mean(axis=1)

        caps_c = self.caps[idx]  # (K, S, 2)
        out[:, 23] = 1.0 - self.util[idx, 0].sum(axis=1) / caps_c[:, :, 0].sum(axis=1)
        out[:, 24] = 1.0 - self.util[idx, 1].sum(axis=1) / caps_c[:, :, 1].sum(axis=1)
        out[:, 25] = self.eta_cpu[idx].mean(axis=1)
        out[:, 26] = s / self.n_servers
        out[:, 27] = (0.5 * (cpu_fr + mem_fr) > OVERLOAD_THRESHOLD).mean(axis=1)
        return out

    def observe_all(self, include_null: bool = False) -> np.ndarray:
        """(A, obs_dim) observation batch for the buffered jobs, in buffer order.

        With include_null a trailing row holds the zero-demand observer used
        for the per-timestep value trace.
        """
        a = self.n_buffered
        base = self._base_obs()
        rows = a + 1 if include_null else a
        obs = np.repeat(base[None, :], rows, axis=0)
        if a:
            demands = self.buffer_demands
            s = self.slot_count
            ids = np.minimum(np.arange(a), s - 1)
            obs[:a, -4] = demands[:, 0] / workload.MAX_CPU_REQ
            obs[:a, -3] = demands[:, 1] / workload.MAX_MEM_REQ
            obs[:a, -1] = ids / s
        return obs

    def build_observation(
        self, job: Job | None, agent_index: int, mode: str | None = None
    ) -> np.ndarray:
        """Single observation row; job None means the zero-demand observer."""
        if mode is not None and mode != self.obs_mode:
            raise ValueError(
                f"requested mode {mode!r} but scale declares {self.obs_mode!r}"
            )
        obs = self._base_obs()
        if job is not None:
            obs[-4] = job.cpu_req / workload.MAX_CPU_REQ
            obs[-3] = job.mem_req / workload.MAX_MEM_REQ
        obs[-1] = min(agent_index, self.slot_count - 1) / self.slot_count
        return obs

    # ------------------------------------------------------------------
    # snapshot/restore for probing experiments

    def snapshot(self) -> dict:
        return {
            "t": self.t,
            "util": self.util.copy(),
            "queues": [list(q) for q in self.queues],
            "queue_len": self.queue_len.copy(),
            "queued_demand": self.queued_demand.copy(),
            "run_rem": self._run_rem[: self.n_running].copy(),
            "run_dem": self._run_dem[: self.n_running].copy(),
            "run_sid": self._run_sid[: self.n_running].copy(),
            "run_jid": self._run_jid[: self.n_running].copy(),
            "n_completed": self.n_completed,
            "buf": (self._buf_start, self._buf_end),
            "rng": self.rng.bit_generator.state,
        }

    def restore(self, snap: dict) -> None:
        self.t = snap["t"]
        self.util = snap["util"].copy()
        self.queues = [deque(q) for q in snap["queues"]]
        self.queue_len = snap["queue_len"].copy()
        self.queued_demand = snap["queued_demand"].copy()
        k = len(snap["run_rem"])
        self.n_running = k
        self._run_rem[:k] = snap["run_rem"]
        self._run_dem[:k] = snap["run_dem"]
        self._run_sid[:k] = snap["run_sid"]
        self._run_jid[:k] = snap["run_jid"]
        self.n_completed = snap["n_completed"]
        self._buf_start, self._buf_end = snap["buf"]
        self.rng.bit_generator.state = snap["rng"]


def within_cluster_bestfit(
    util: np.ndarray, caps: np.ndarray, cluster: np.ndarray, demand
) -> int:
    """Pick the fullest fitting server in the cluster, else the emptiest.

    Fit requires headroom in both dimensions; fullness is the mean
    fractional utilization across dimensions. Ties break to the lowest
    server index.
    """
    cluster = np.asarray(cluster)
    if cluster.size == 0:
        raise ValueError("cluster must be non-empty")
    u = util[cluster]
    c = caps[cluster]
    frac = (u / c).mean(axis=1)
    fits = (u[:, 0] + demand[0] <= c[:, 0]) & (u[:, 1] + demand[1] <= c[:, 1])
    order = np.argsort(cluster, kind="stable")
    if fits.any():
        cand = order[fits[order]]
        best = cand[np.argmax(frac[cand])]
    else:
        best = order[np.argmin(frac[order])]
    return int(cluster[best])

"""JIT-compiled full-episode rollout for linear policies and heuristics.

The kernel replays the exact environment mechanics of ClusterEnv (same
operation order, same tie-breaking) over a pre-generated arrival stream,
with the policy forward pass fused into the step loop. Queues are linked
lists over job ids so queue operations are O(1) regardless of backlog.
Action randomness comes from one pre-drawn uniform per job, so results
are independent of scheduling across worker processes.

Used automatically for linear/raw-observation rollouts when numba is
available; the pure-numpy path is the reference and the test suite checks
the two agree.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f

        return wrap if not (len(a) == 1 and callable(a[0])) else a[0]


POLICY_LINEAR = 0
POLICY_GREEDY = 1
POLICY_BESTFIT = 2
POLICY_RANDOM = 3

ADMISSION_SCAN_LIMIT = 128
QUEUE_OBS_CLIP = 50.0
W_QUEUE = 1.0
W_ENERGY = 20.0
MIN_D0 = 0.2
MIN_D1 = 0.5
MAX_CPU_REQ = 20.0
MAX_MEM_REQ = 128.0


@njit(cache=True)
def run_rollout_kernel(
    episode_len,
    arrivals_end,
    n_servers,
    slot_count,
    obs_dim,
    caps,  # (N, 2)
    eta_cpu,  # (N,)
    server_static,  # (N, 7) with cols 3..6 filled
    cluster_of_action,  # (K, S) server ids per action, ascending server index
    counts,  # (T_arr,) arrivals per step
    starts,  # (T_arr + 1,) cumulative offsets
    job_cpu,  # (J,)
    job_mem,  # (J,)
    job_dur,  # (J,)
    actor_w,  # (K, D)
    actor_b,  # (K,)
    critic_w,  # (D,)
    critic_b,  # float
    policy_kind,  # 0 sample, 1 greedy, 2 bestfit, 3 random
    action_u,  # (J,) pre-drawn uniforms
    collect,  # bool: fill per-job training outputs
    # outputs
    rewards,  # (T,)
    vbar,  # (T,)
    out_action,  # (J,)
    out_server,  # (J,)
    out_logp,  # (J,)
    out_value,  # (J,)
    out_entropy,  # (J,)
    out_coef,  # (J,)
    obs_out,  # (J, D) or (1, D) when not collecting
):
    n = n_servers
    k_act = cluster_of_action.shape[0]
    s_per = cluster_of_action.shape[1]
    total_jobs = job_cpu.shape[0]

    util = np.zeros((n, 2))
    q_head = np.full(n, -1, dtype=np.int64)
    q_tail = np.full(n, -1, dtype=np.int64)
    q_next = np.full(total_jobs, -1, dtype=np.int64)
    q_len = np.zeros(n, dtype=np.int64)
    q_dem = np.zeros((n, 2))

    run_rem = np.empty(total_jobs)
    run_sid = np.empty(total_jobs, dtype=np.int64)
    run_d0 = np.empty(total_jobs)
    run_d1 = np.empty(total_jobs)
    n_run = 0
    n_completed = 0

    base = np.zeros(obs_dim)
    mu_sum0 = 0.0
    mu_sum1 = 0.0
    for i in range(n):
        mu_sum0 += caps[i, 0]
        mu_sum1 += caps[i, 1]
    c_total = mu_sum0 + mu_sum1

    placements = np.empty(total_jobs, dtype=np.int64)
    probs = np.empty(k_act)

    for t in range(episode_len):
        if t < arrivals_end:
            b0 = starts[t]
            b1 = starts[t + 1]
        else:
            b0 = 0
            b1 = 0
        a = b1 - b0

        # observation base row: server block, task block, temporal
        for i in range(n):
            off = 7 * i
            base[off] = util[i, 0] / caps[i, 0]
            base[off + 1] = util[i, 1] / caps[i, 1]
            ql = q_len[i] if q_len[i] < QUEUE_OBS_CLIP else QUEUE_OBS_CLIP
            base[off + 2] = ql / QUEUE_OBS_CLIP
            base[off + 3] = server_static[i, 3]
            base[off + 4] = server_static[i, 4]
            base[off + 5] = server_static[i, 5]
            base[off + 6] = server_static[i, 6]
        nblk = 7 * n
        for sidx in range(slot_count):
            j = b0 + sidx
            if sidx < a:
                base[nblk + 2 * sidx] = job_cpu[j] / MAX_CPU_REQ
                base[nblk + 2 * sidx + 1] = job_mem[j] / MAX_MEM_REQ
            else:
                base[nblk + 2 * sidx] = 0.0
                base[nblk + 2 * sidx + 1] = 0.0
        base[obs_dim - 4] = 0.0
        base[obs_dim - 3] = 0.0
        base[obs_dim - 2] = t / episode_len
        base[obs_dim - 1] = 0.0

        # observer value for the per-step value trace
        v0 = critic_b
        for d in range(obs_dim):
            v0 += critic_w[d] * base[d]
        vbar[t] = v0

        if a > 0:
            # allocated load for the guidance reference (pre-placement)
            c0 = 0.0
            c1 = 0.0
            for i in range(n):
                c0 += util[i, 0]
                c1 += util[i, 1]
            ratio0 = c0 / mu_sum0
            ratio1 = c1 / mu_sum1

            for j in range(b0, b1):
                agent = j - b0
                own_cpu = job_cpu[j] / MAX_CPU_REQ
                own_mem = job_mem[j] / MAX_MEM_REQ
                aid = agent if agent < slot_count - 1 else slot_count - 1
                idf = aid / slot_count
                base[obs_dim - 4] = own_cpu
                base[obs_dim - 3] = own_mem
                base[obs_dim - 1] = idf

                if policy_kind == POLICY_BESTFIT:
                    # committed-load best fit over the whole fleet
                    best_frac = -1.0
                    pick = -1
                    worst_frac = 1e300
                    worst = 0
                    for i in range(n):
                        co0 = util[i, 0] + q_dem[i, 0]
                        co1 = util[i, 1] + q_dem[i, 1]
                        frac = 0.5 * (co0 / caps[i, 0] + co1 / caps[i, 1])
                        if (
                            co0 + job_cpu[j] <= caps[i, 0]
                            and co1 + job_mem[j] <= caps[i, 1]
                            and frac > best_frac
                        ):
                            best_frac = frac
                            pick = i
                        if frac < worst_frac:
                            worst_frac = frac
                            worst = i
                    sid = pick if pick >= 0 else worst
                    act = sid
                    logp = 0.0
                    ent = 0.0
                    val = 0.0
                else:
                    if policy_kind == POLICY_RANDOM:
                        act = int(action_u[j] * k_act)
                        if act >= k_act:
                            act = k_act - 1
                        logp = -np.log(k_act)
                        ent = np.log(k_act)
                        val = 0.0
                    else:
                        # linear actor: logits, stable softmax
                        zmax = -1e300
                        for kk in range(k_act):
                            z = actor_b[kk]
                            for d in range(obs_dim):
                                z += actor_w[kk, d] * base[d]
                            probs[kk] = z
                            if z > zmax:
                                zmax = z
                        norm = 0.0
                        for kk in range(k_act):
                            probs[kk] = np.exp(probs[kk] - zmax)
                            norm += probs[kk]
                        ent = 0.0
                        logn = np.log(norm)
                        if policy_kind == POLICY_GREEDY:
                            act = 0
                            pbest = probs[0]
                            for kk in range(1, k_act):
                                if probs[kk] > pbest:
                                    pbest = probs[kk]
                                    act = kk
                        else:
                            u = action_u[j] * norm
                            cum = 0.0
                            act = k_act - 1
                            for kk in range(k_act):
                                cum += probs[kk]
                                if u < cum:
                                    act = kk
                                    break
                        for kk in range(k_act):
                            p = probs[kk] / norm
                            if p > 0.0:
                                ent -= p * np.log(p)
                        logp = np.log(probs[act]) - logn
                        val = critic_b
                        for d in range(obs_dim):
                            val += critic_w[d] * base[d]

                    # within-cluster best fit (running utilization only)
                    if s_per == 1:
                        sid = cluster_of_action[act, 0]
                    else:
                        best_frac = -1.0
                        pick = -1
                        worst_frac = 1e300
                        worst = 0
                        for si in range(s_per):
                            i = cluster_of_action[act, si]
                            frac = 0.5 * (
                                util[i, 0] / caps[i, 0] + util[i, 1] / caps[i, 1]
                            )
                            if (
                                util[i, 0] + job_cpu[j] <= caps[i, 0]
                                and util[i, 1] + job_mem[j] <= caps[i, 1]
                                and frac > best_frac
                            ):
                                best_frac = frac
                                pick = i
                            if frac < worst_frac:
                                worst_frac = frac
                                worst = i
                        sid = pick if pick >= 0 else worst

                placements[agent] = sid
                if collect:
                    out_action[j] = act
                    out_server[j] = sid
                    out_logp[j] = logp
                    out_value[j] = val
                    out_entropy[j] = ent
                    out_coef[j] = job_cpu[j] * (
                        util[sid, 0] - caps[sid, 0] * ratio0
                    ) + job_mem[j] * (util[sid, 1] - caps[sid, 1] * ratio1)
                    for d in range(obs_dim):
                        obs_out[j, d] = base[d]

            # 1. route to queues
            for j in range(b0, b1):
                sid = placements[j - b0]
                if q_tail[sid] >= 0:
                    q_next[q_tail[sid]] = j
                else:
                    q_head[sid] = j
                q_tail[sid] = j
                q_next[j] = -1
                q_len[sid] += 1
                q_dem[sid, 0] += job_cpu[j]
                q_dem[sid, 1] += job_mem[j]

        # 2. admission: FIFO scan with skipping, bounded misses per server
        for i in range(n):
            if q_len[i] == 0:
                continue
            cap0 = caps[i, 0]
            cap1 = caps[i, 1]
            u0 = util[i, 0]
            u1 = util[i, 1]
            if cap0 - u0 < MIN_D0 or cap1 - u1 < MIN_D1:
                continue
            misses = 0
            prev = np.int64(-1)
            j = q_head[i]
            admitted = 0
            while j >= 0 and misses < ADMISSION_SCAN_LIMIT:
                nxt = q_next[j]
                d0 = job_cpu[j]
                d1 = job_mem[j]
                if u0 + d0 <= cap0 and u1 + d1 <= cap1:
                    u0 += d0
                    u1 += d1
                    q_dem[i, 0] -= d0
                    q_dem[i, 1] -= d1
                    if prev >= 0:
                        q_next[prev] = nxt
                    else:
                        q_head[i] = nxt
                    if nxt < 0:
                        q_tail[i] = prev
                    q_len[i] -= 1
                    run_rem[n_run] = job_dur[j]
                    run_sid[n_run] = i
                    run_d0[n_run] = d0
                    run_d1[n_run] = d1
                    n_run += 1
                    admitted += 1
                else:
                    misses += 1
                    prev = j
                j = nxt
            if admitted > 0:
                util[i, 0] = u0
                util[i, 1] = u1
                if q_len[i] == 0:
                    q_dem[i, 0] = 0.0
                    q_dem[i, 1] = 0.0
                else:
                    if q_dem[i, 0] < 0.0:
                        q_dem[i, 0] = 0.0
                    if q_dem[i, 1] < 0.0:
                        q_dem[i, 1] = 0.0

        # 3. execution and completion
        w = 0
        for r_i in range(n_run):
            sid = run_sid[r_i]
            rem = run_rem[r_i] - eta_cpu[sid]
            if rem <= 0.0:
                util[sid, 0] -= run_d0[r_i]
                util[sid, 1] -= run_d1[r_i]
                if util[sid, 0] < 0.0:
                    util[sid, 0] = 0.0
                if util[sid, 1] < 0.0:
                    util[sid, 1] = 0.0
                n_completed += 1
            else:
                run_rem[w] = rem
                run_sid[w] = sid
                run_d0[w] = run_d0[r_i]
                run_d1[w] = run_d1[r_i]
                w += 1
        n_run = w

        # 4./5. next-step arrivals are implicit; shared reward
        nq = 0
        for i in range(n):
            nq += q_len[i]
        if t + 1 < arrivals_end:
            nq += counts[t + 1]
        energy = 0.0
        for i in range(n):
            energy += (util[i, 0] + util[i, 1]) / eta_cpu[i]
        rewards[t] = -(W_QUEUE * nq / n + W_ENERGY * energy / c_total)

    return n_completed, n_run


def run_fast_episode(
    env,
    policy_kind: int,
    actor_w: np.ndarray | None = None,
    actor_b: np.ndarray | None = None,
    critic_w: np.ndarray | None = None,
    critic_b: float = 0.0,
    action_seed=0,
    collect: bool = False,
):
    """Drive the kernel from a freshly-constructed ClusterEnv.

    Returns a dict of the kernel outputs; per-job arrays are only
    meaningful when collect is True.
    """
    j = env.total_jobs
    d = env.obs_dim
    k = env.act_dim
    cluster_sorted = np.sort(env.cluster_idx, axis=1).astype(np.int64)
    if actor_w is None:
        actor_w = np.zeros((1, d))
        actor_b = np.zeros(1)
    if critic_w is None:
        critic_w = np.zeros(d)
    rng = np.random.default_rng(action_seed)
    action_u = rng.random(j)

    rewards = np.empty(env.episode_len)
    vbar = np.empty(env.episode_len)
    if collect:
        out_action = np.empty(j, dtype=np.int64)
        out_server = np.empty(j, dtype=np.int64)
        out_logp = np.empty(j)
        out_value = np.empty(j)
        out_entropy = np.empty(j)
        out_coef = np.empty(j)
        obs_out = np.empty((j, d))
    else:
        out_action = np.empty(1, dtype=np.int64)
        out_server = np.empty(1, dtype=np.int64)
        out_logp = np.empty(1)
        out_value = np.empty(1)
        out_entropy = np.empty(1)
        out_coef = np.empty(1)
        obs_out = np.empty((1, d))

    n_completed, n_running = run_rollout_kernel(
        env.episode_len,
        env.arrivals_end,
        env.n_servers,
        env.slot_count,
        d,
        env.caps,
        env.eta_cpu,
        env._server_static,
        cluster_sorted,
        env.arrival_counts.astype(np.int64),
        env.arrival_starts,
        env.job_demand[:, 0].copy(),
        env.job_demand[:, 1].copy(),
        env.job_duration,
        actor_w,
        actor_b,
        critic_w,
        float(critic_b),
        policy_kind,
        action_u,
        collect,
        rewards,
        vbar,
        out_action,
        out_server,
        out_logp,
        out_value,
        out_entropy,
        out_coef,
        obs_out,
    )
    return {
        "rewards": rewards,
        "vbar": vbar,
        "actions": out_action,
        "servers": out_server,
        "log_probs": out_logp,
        "values": out_value,
        "entropies": out_entropy,
        "coefs": out_coef,
        "obs": obs_out,
        "t_idx": env.job_arrival_t.astype(np.int64),
        "n_completed": n_completed,
        "n_running": n_running,
    }


_WARM = False


def warmup() -> None:
    """Compile the kernel once (before forking worker pools)."""
    global _WARM
    if _WARM or not HAVE_NUMBA:
        return
    from .fleet import ScaleConfig, SERVER_TYPES
    from .env import ClusterEnv, Scenario

    scale = ScaleConfig("warmup", 2, 2, episode_len=4, arrivals_end=2)
    scen = Scenario(seed=0, scale=scale, fleet=tuple(SERVER_TYPES[:2]), base_rate=1.0)
    env = ClusterEnv(scen, slot_count=3)
    run_fast_episode(
        env,
        POLICY_LINEAR,
        actor_w=np.zeros((env.act_dim, env.obs_dim)),
        actor_b=np.zeros(env.act_dim),
        critic_w=np.zeros(env.obs_dim),
        collect=True,
    )
    _WARM = True

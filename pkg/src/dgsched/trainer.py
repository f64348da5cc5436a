"""PPO-family training engine: GAE, guided advantages, split-epoch updates.

Three algorithm modes share one loop. "dgpg" mixes the normalized
analytical guidance coefficient into standardized GAE advantages with a
scheduled weight; "mappo" is the same machinery at zero guidance with a
full-observation critic; "ippo" restricts the critic to the agent-local
observation slice. Each job-agent contributes one decision transition;
its advantage extends the per-timestep GAE trace computed on a
zero-demand observer value baseline, with the agent's own critic value
substituted at the decision step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .config import TrainConfig
from .env import ClusterEnv, Scenario
from .guidance import RunningNorm, batch_coefficients
from .policy import (
    Policy,
    PolicySpec,
    local_critic_index,
    log_softmax,
    task_block_size,
)
from .workload import agent_slot_count

ADV_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when an update produces a non-finite loss."""


# ----------------------------------------------------------------------
# schedules

def alpha_schedule(progress: float) -> float:
    """Guidance weight: 0.9 early, linear decay to 0.2, then constant."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if progress <= 0.1:
        return 0.9
    if progress <= 0.5:
        return 0.9 - 0.7 * (progress - 0.1) / 0.4
    return 0.2


def alpha_at(cfg: TrainConfig, progress: float) -> float:
    if cfg.algorithm != "dgpg":
        return 0.0
    if cfg.alpha_schedule == "const":
        return cfg.alpha_const
    return alpha_schedule(progress)


def lr_at(cfg: TrainConfig, progress: float) -> float:
    if cfg.lr_decay == "none":
        return cfg.lr
    if cfg.lr_decay == "exp":
        return cfg.lr * cfg.lr_final_scale**progress
    frac = min(progress, cfg.lr_decay_end) / cfg.lr_decay_end
    return cfg.lr * (1.0 - (1.0 - cfg.lr_final_scale) * frac)


def entropy_at(cfg: TrainConfig, progress: float) -> float:
    if cfg.entropy_decay == "none":
        return cfg.entropy_coef
    return cfg.entropy_coef * (cfg.entropy_final / cfg.entropy_coef) ** progress


# ----------------------------------------------------------------------
# advantage machinery

def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard GAE over an aligned reward/value trace.

    bootstrap_value is the value of the state after the last reward (0 at a
    true terminal). Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must align")
    nxt = np.concatenate([values[1:], [bootstrap_value]])
    delta = rewards + gamma * nxt - values
    adv = lfilter([1.0], [1.0, -gamma * lam], delta[::-1])[::-1]
    return adv, adv + values


def augment_advantage(a_gae, guidance_coef, alpha):
    """Mix guidance into the advantage: (1 - alpha) * A - alpha * g."""
    if np.any(np.asarray(alpha) < 0) or np.any(np.asarray(alpha) > 1):
        raise ValueError("alpha must lie in [0, 1]")
    return (1.0 - alpha) * a_gae - alpha * guidance_coef


def stitch_decision_advantages(
    rewards: np.ndarray,
    vbar: np.ndarray,
    t_idx: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-decision GAE for agents that act once.

    Each job-agent's trajectory is a single placement at step t: its GAE is
    the one-step delta built from the shared reward trace, its own critic
    value, and a bootstrap from the next timestep's observer value (zero at
    the terminal step). Equivalent to compute_gae on each length-1
    trajectory; lam is accepted for signature symmetry but is inert for
    single-step trajectories.
    """
    del lam
    vbar_next = np.concatenate([vbar[1:], [0.0]])
    boot = rewards + gamma * vbar_next
    returns = boot[t_idx]
    return returns - values, returns


# ----------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, keys, beta1=0.9, beta2=0.999, eps=1e-8):
        self.keys = list(keys)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in self.keys:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ----------------------------------------------------------------------
# rollouts

@dataclass
class RolloutResult:
    obs: np.ndarray  # (M, D) decision observations
    actions: np.ndarray  # (M,)
    log_probs: np.ndarray  # (M,)
    advantages: np.ndarray  # (M,) raw stitched GAE
    returns: np.ndarray  # (M,) critic targets
    guidance_raw: np.ndarray  # (M,) unnormalized guidance coefficients
    mean_reward: float  # per-step mean over the episode
    mean_entropy: float


def _fastpath_ok(policy: Policy) -> bool:
    from . import fastpath

    return fastpath.HAVE_NUMBA and policy.spec.arch == "linear"


def _full_critic_w(policy: Policy) -> np.ndarray:
    """Critic weights scattered to full observation width (zeros off-slice)."""
    if policy.spec.critic_index is None:
        return policy.params["critic_w"]
    w = np.zeros(policy.spec.obs_dim)
    w[list(policy.spec.critic_index)] = policy.params["critic_w"]
    return w


def collect_rollout(
    scen: Scenario,
    policy: Policy,
    cfg: TrainConfig,
    action_seed,
    slot_count: int | None = None,
    use_fast: bool | None = None,
) -> RolloutResult:
    """Play one full scenario episode, returning per-decision training data."""
    if use_fast is None:
        use_fast = _fastpath_ok(policy)
    if use_fast:
        return _collect_rollout_fast(scen, policy, cfg, action_seed, slot_count)
    env = ClusterEnv(scen, slot_count=slot_count)
    rng = np.random.default_rng(action_seed)
    want_guidance = cfg.algorithm == "dgpg"

    t_len = env.episode_len
    rewards = np.empty(t_len)
    vbar = np.empty(t_len)
    obs_parts, act_parts, logp_parts, val_parts, coef_parts = [], [], [], [], []
    t_idx_parts = []
    ent_sum = 0.0
    ent_n = 0

    while env.t < t_len:
        t = env.t
        a = env.n_buffered
        obs_all = env.observe_all(include_null=True)
        values = policy.critic_values(obs_all)
        vbar[t] = values[a]
        if a:
            actions, logps, ents = policy.act_batch(obs_all[:a], rng)
            placements = env.resolve_actions(actions)
            if want_guidance:
                coef_parts.append(
                    batch_coefficients(
                        env.util,
                        env.caps,
                        env.total_load(),
                        env.buffer_demands,
                        placements,
                    )
                )
            obs_parts.append(obs_all[:a])
            act_parts.append(actions)
            logp_parts.append(logps)
            val_parts.append(values[:a])
            t_idx_parts.append(np.full(a, t, dtype=np.int64))
            ent_sum += float(ents.sum())
            ent_n += a
        else:
            placements = np.empty(0, dtype=np.int64)
        r, _ = env.step(placements)
        rewards[t] = r

    if obs_parts:
        obs = np.concatenate(obs_parts)
        actions = np.concatenate(act_parts)
        logps = np.concatenate(logp_parts)
        vals = np.concatenate(val_parts)
        t_idx = np.concatenate(t_idx_parts)
        advantages, returns = stitch_decision_advantages(
            rewards, vbar, t_idx, vals, cfg.gamma, cfg.gae_lambda
        )
        guidance = (
            np.concatenate(coef_parts) if want_guidance else np.zeros(len(obs))
        )
    else:
        d = env.obs_dim
        obs = np.empty((0, d))
        actions = logps = vals = t_idx = np.empty(0)
        advantages = returns = guidance = np.empty(0)

    return RolloutResult(
        obs=obs,
        actions=actions.astype(np.int64),
        log_probs=logps,
        advantages=advantages,
        returns=returns,
        guidance_raw=guidance,
        mean_reward=float(rewards.mean()),
        mean_entropy=ent_sum / max(ent_n, 1),
    )


def _collect_rollout_fast(
    scen: Scenario,
    policy: Policy,
    cfg: TrainConfig,
    action_seed,
    slot_count: int | None,
) -> RolloutResult:
    from . import fastpath

    env = ClusterEnv(scen, slot_count=slot_count)
    out = fastpath.run_fast_episode(
        env,
        fastpath.POLICY_LINEAR,
        actor_w=policy.params["actor_w"],
        actor_b=policy.params["actor_b"],
        critic_w=_full_critic_w(policy),
        critic_b=float(policy.params["critic_b"][0]),
        action_seed=action_seed,
        collect=True,
    )
    t_idx = out["t_idx"]
    advantages, returns = stitch_decision_advantages(
        out["rewards"], out["vbar"], t_idx, out["values"], cfg.gamma, cfg.gae_lambda
    )
    guidance = (
        out["coefs"] if cfg.algorithm == "dgpg" else np.zeros(len(t_idx))
    )
    return RolloutResult(
        obs=out["obs"],
        actions=out["actions"],
        log_probs=out["log_probs"],
        advantages=advantages,
        returns=returns,
        guidance_raw=guidance,
        mean_reward=float(out["rewards"].mean()),
        mean_entropy=float(out["entropies"].mean()) if len(t_idx) else 0.0,
    )


def _rollout_task(args):
    scen, policy, cfg, action_seed, slot_count = args
    return collect_rollout(scen, policy, cfg, action_seed, slot_count)


# ----------------------------------------------------------------------
# PPO update

@dataclass
class UpdateStats:
    kl: float
    clip_fraction: float
    entropy: float
    value_loss: float
    explained_variance: float


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray  # already augmented/standardized
    returns: np.ndarray


def ppo_update(
    policy: Policy,
    batch: Batch,
    cfg: TrainConfig,
    lr: float,
    entropy_coef: float,
    adam_actor: Adam,
    adam_critic: Adam,
    rng: np.random.Generator,
) -> UpdateStats:
    """Split-epoch PPO step: critic first (Huber), then clipped-surrogate actor.

    Minibatches are contiguous slices of one shuffled copy per head, so the
    hot loops run on views instead of repeated fancy-index gathers.
    """
    m = len(batch.obs)
    if m == 0:
        raise ValueError("empty batch")
    mb = min(cfg.minibatch_size, m)
    delta = cfg.huber_delta
    linear = policy.spec.arch == "linear"

    perm = rng.permutation(m)
    if policy.spec.critic_index is not None:
        obs_c = batch.obs[:, list(policy.spec.critic_index)][perm]
    else:
        obs_c = batch.obs[perm]
    ret_c = batch.returns[perm]

    value_loss = 0.0
    for _ in range(cfg.critic_epochs):
        for lo in range(0, m, mb):
            x = obs_c[lo : lo + mb]
            tgt = ret_c[lo : lo + mb]
            if cfg.return_normalization:
                tgt = (tgt - tgt.mean()) / (tgt.std() + ADV_EPS)
            if linear:
                v = x @ policy.params["critic_w"] + policy.params["critic_b"][0]
            else:
                v = policy.critic_values(batch.obs[perm[lo : lo + mb]])
            err = v - tgt
            abs_err = np.abs(err)
            huber = np.where(
                abs_err <= delta, 0.5 * err * err, delta * (abs_err - 0.5 * delta)
            )
            value_loss = float(huber.mean())
            if not np.isfinite(value_loss):
                raise TrainingDiverged(f"non-finite value loss {value_loss}")
            dv = np.clip(err, -delta, delta) / len(x)
            if linear:
                grads = {"critic_w": dv @ x, "critic_b": np.array([dv.sum()])}
            else:
                grads = policy.critic_backward(batch.obs[perm[lo : lo + mb]], dv)
            clip_grad_norm(grads, cfg.grad_clip_norm)
            adam_critic.step(policy.params, grads, lr)

    perm = rng.permutation(m)
    obs_a = batch.obs[perm]
    adv_a = batch.advantages[perm]
    old_a = batch.log_probs[perm]
    act_a = batch.actions[perm]

    kl_sum = clip_sum = ent_sum = 0.0
    n_mb = 0
    eps = cfg.clip_eps
    for _ in range(cfg.actor_epochs):
        for lo in range(0, m, mb):
            x = obs_a[lo : lo + mb]
            adv = adv_a[lo : lo + mb]
            old_logp = old_a[lo : lo + mb]
            acts = act_a[lo : lo + mb]

            if linear:
                logits = x @ policy.params["actor_w"].T + policy.params["actor_b"]
            else:
                logits = policy.actor_logits(x)
            logp_all = log_softmax(logits)
            probs = np.exp(logp_all)
            rows = np.arange(len(x))
            logp = logp_all[rows, acts]
            ratio = np.exp(logp - old_logp)

            clipped = ((adv > 0) & (ratio > 1.0 + eps)) | (
                (adv < 0) & (ratio < 1.0 - eps)
            )
            surr = np.where(
                clipped, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv, ratio * adv
            )
            ent = -(probs * logp_all).sum(axis=1)
            loss = -(surr.mean() + entropy_coef * ent.mean())
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite actor loss {loss}")

            # d(-objective)/dlogits; the clipped surrogate branch has zero
            # gradient, and dH/dz_k = -p_k (log p_k + H) for the bonus
            coef = np.where(clipped, 0.0, ratio * adv) / len(x)
            dlogits = coef[:, None] * probs
            dlogits[rows, acts] -= coef
            dlogits += (entropy_coef / len(x)) * probs * (logp_all + ent[:, None])
            if linear:
                grads = {"actor_w": dlogits.T @ x, "actor_b": dlogits.sum(axis=0)}
            else:
                grads = policy.actor_backward(x, dlogits)
            clip_grad_norm(grads, cfg.grad_clip_norm)
            adam_actor.step(policy.params, grads, lr)

            kl_sum += float((old_logp - logp).mean())
            clip_sum += float(clipped.mean())
            ent_sum += float(ent.mean())
            n_mb += 1

    v_full = policy.critic_values(batch.obs)
    tgt_full = batch.returns
    if cfg.return_normalization:
        tgt_full = (tgt_full - tgt_full.mean()) / (tgt_full.std() + ADV_EPS)
    var = float(np.var(tgt_full))
    ev = 1.0 - float(np.var(tgt_full - v_full)) / var if var > 0 else 0.0
    return UpdateStats(
        kl_sum / max(n_mb, 1),
        clip_sum / max(n_mb, 1),
        ent_sum / max(n_mb, 1),
        value_loss,
        ev,
    )


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    metrics: list[dict]
    policy: Policy
    best_policy: Policy
    best_episode: int
    best_validation: float


def build_policy(cfg: TrainConfig, scen: Scenario, seed: int = 0) -> Policy:
    """Instantiate the policy matching a scale's observation/action geometry."""
    scale = scen.scale
    slot = agent_slot_count(scale)
    env = ClusterEnv(scen, slot_count=slot)
    critic_index = None
    if cfg.algorithm == "ippo":
        critic_index = local_critic_index(
            env.obs_dim, task_block_size(scale.n_servers, slot, scale.obs_mode)
        )
    spec = PolicySpec(
        arch=cfg.arch,
        obs_dim=env.obs_dim,
        act_dim=env.act_dim,
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        n_embed=slot,
        critic_index=critic_index,
    )
    return Policy(spec, seed=seed)


def run_training(
    train_scenarios: list[Scenario],
    cfg: TrainConfig,
    seed: int,
    validation_scenarios: list[Scenario] | None = None,
    workers: int | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Full training run: rollouts, guidance, GAE, augmented PPO updates.

    All randomness derives from (seed, episode, rollout) so results do not
    depend on the worker count or the algorithm label.
    """
    if not train_scenarios:
        raise ValueError("scenario set must be non-empty")
    scale = train_scenarios[0].scale
    slot = agent_slot_count(scale)
    policy = build_policy(cfg, train_scenarios[0], seed=seed)
    adam_actor = Adam(policy._actor_keys)
    adam_critic = Adam(policy._critic_keys)
    guide_norm = RunningNorm()

    if validation_scenarios is None:
        validation_scenarios = train_scenarios[-cfg.n_validation :]

    pool = None
    n_workers = workers if workers is not None else cfg.parallel_envs
    if _fastpath_ok(policy):
        from . import fastpath

        fastpath.warmup()  # compile before forking workers
    if n_workers > 1 and cfg.rollouts_per_episode > 1:
        import multiprocessing as mp

        pool = mp.get_context("fork").Pool(min(n_workers, cfg.rollouts_per_episode))

    metrics: list[dict] = []
    best_policy = policy.copy()
    best_val = -np.inf
    best_episode = -1
    try:
        for episode in range(cfg.episodes):
            t0 = time.perf_counter()
            progress = episode / cfg.episodes
            alpha = alpha_at(cfg, progress)
            lr = lr_at(cfg, progress)
            ent_coef = entropy_at(cfg, progress)

            ep_rng = np.random.default_rng(np.random.SeedSequence([seed, episode, 0]))
            scen_ids = ep_rng.integers(0, len(train_scenarios), cfg.rollouts_per_episode)
            tasks = [
                (
                    train_scenarios[sid],
                    policy,
                    cfg,
                    np.random.SeedSequence([seed, episode, int(k), 1]),
                    slot,
                )
                for k, sid in enumerate(scen_ids)
            ]
            if pool is not None:
                rollouts = pool.map(_rollout_task, tasks)
            else:
                rollouts = [_rollout_task(t) for t in tasks]

            obs = np.concatenate([r.obs for r in rollouts])
            actions = np.concatenate([r.actions for r in rollouts])
            logps = np.concatenate([r.log_probs for r in rollouts])
            adv_raw = np.concatenate([r.advantages for r in rollouts])
            returns = np.concatenate([r.returns for r in rollouts])
            g_raw = np.concatenate([r.guidance_raw for r in rollouts])

            adv_std = (adv_raw - adv_raw.mean()) / (adv_raw.std() + ADV_EPS)
            if cfg.algorithm == "dgpg":
                g_norm = guide_norm.update_batch(g_raw)
            else:
                g_norm = g_raw  # zeros
            advantages = augment_advantage(adv_std, g_norm, alpha)

            upd_rng = np.random.default_rng(np.random.SeedSequence([seed, episode, 2]))
            stats = ppo_update(
                policy,
                Batch(obs, actions, logps, advantages, returns),
                cfg,
                lr,
                ent_coef,
                adam_actor,
                adam_critic,
                upd_rng,
            )

            mean_reward = float(np.mean([r.mean_reward for r in rollouts]))
            wall_ms = (time.perf_counter() - t0) * 1000.0
            metrics.append(
                {
                    "episode": episode,
                    "scale": scale.name,
                    "algorithm": cfg.algorithm,
                    "seed": seed,
                    "mean_reward": mean_reward,
                    "alpha": alpha,
                    "entropy": stats.entropy,
                    "wall_ms": wall_ms,
                }
            )
            if verbose:
                print(
                    f"ep {episode:4d} reward {mean_reward:9.2f} alpha {alpha:.2f} "
                    f"ent {stats.entropy:.3f} ev {stats.explained_variance:.2f} "
                    f"({wall_ms:.0f} ms)",
                    flush=True,
                )

            last = episode == cfg.episodes - 1
            if validation_scenarios and (
                (episode + 1) % cfg.eval_every == 0 or last
            ):
                val_mean, _ = evaluate(
                    policy, validation_scenarios, deterministic=True, pool=pool
                )
                if val_mean > best_val:
                    best_val = val_mean
                    best_policy = policy.copy()
                    best_episode = episode
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    return TrainResult(metrics, policy, best_policy, best_episode, best_val)


# ----------------------------------------------------------------------
# evaluation


def _eval_task(args):
    scen, policy, deterministic, slot = args
    return run_episode(scen, policy, deterministic, slot)


def run_episode(
    scen: Scenario,
    policy: Policy,
    deterministic: bool = True,
    slot_count: int | None = None,
    use_fast: bool | None = None,
) -> float:
    """One evaluation episode (no guidance, no learning); mean per-step reward."""
    if use_fast is None:
        use_fast = _fastpath_ok(policy)
    if use_fast:
        from . import fastpath

        env = ClusterEnv(scen, slot_count=slot_count)
        out = fastpath.run_fast_episode(
            env,
            fastpath.POLICY_GREEDY if deterministic else fastpath.POLICY_LINEAR,
            actor_w=policy.params["actor_w"],
            actor_b=policy.params["actor_b"],
            critic_w=_full_critic_w(policy),
            critic_b=float(policy.params["critic_b"][0]),
            action_seed=scen.seed + 7,
            collect=False,
        )
        return float(out["rewards"].mean())
    env = ClusterEnv(scen, slot_count=slot_count)
    rng = None if deterministic else np.random.default_rng(scen.seed + 7)
    total = 0.0
    while env.t < env.episode_len:
        if env.n_buffered:
            obs = env.observe_all()
            if deterministic:
                actions = policy.greedy_batch(obs)
            else:
                actions, _, _ = policy.act_batch(obs, rng)
            placements = env.resolve_actions(actions)
        else:
            placements = np.empty(0, dtype=np.int64)
        r, _ = env.step(placements)
        total += r
    return total / env.episode_len


def evaluate(
    policy: Policy,
    scenarios: list[Scenario],
    deterministic: bool = True,
    workers: int | None = None,
    pool=None,
) -> tuple[float, float]:
    """Mean and std of per-episode mean reward over a scenario set."""
    if not scenarios:
        raise ValueError("scenario set must be non-empty")
    slot = agent_slot_count(scenarios[0].scale)
    tasks = [(s, policy, deterministic, slot) for s in scenarios]
    own_pool = None
    try:
        if pool is None and workers is not None and workers > 1:
            import multiprocessing as mp

            own_pool = mp.get_context("fork").Pool(min(workers, len(scenarios)))
            pool = own_pool
        if pool is not None:
            rewards = pool.map(_eval_task, tasks)
        else:
            rewards = [_eval_task(t) for t in tasks]
    finally:
        if own_pool is not None:
            own_pool.close()
            own_pool.join()
    arr = np.asarray(rewards)
    return float(arr.mean()), float(arr.std())

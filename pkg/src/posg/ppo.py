"""Clipped-surrogate PPO with GAE and the two-stream guided update.

One iteration collects a batch of complete episodes, then runs a PPO update on
environment-reward advantages followed by a second PPO update on
guidance-reward advantages. Each stream has its own value network.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError
from .guidance import (
    DemoSet,
    DemoTrajectory,
    GuidanceParams,
    ImportanceTable,
    Trajectory,
    WeightedBuffer,
    accumulate_discrete,
    compute_weights,
    demo_features,
    discrete_step_rewards,
    guidance_rewards_continuous,
    scale_guidance,
)
from .kernels import FeatureMap, KernelSpec
from .nn import AdamState, adam_step, clip_grad_norm
from .policy import CategoricalPolicy, GaussianPolicy, ValueFunction

STD_EPS = 1e-8


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    value_learning_rate: float | None = None
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    episodes_per_iteration: int = 16
    # None: 1.0 for the discrete table, gamma for continuous guidance
    guidance_gamma: float | None = None
    env_reward_scale: float = 0.01
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            (0 < self.gamma <= 1, "gamma must be in (0, 1]"),
            (0 <= self.gae_lambda <= 1, "gae_lambda must be in [0, 1]"),
            (self.clip_ratio > 0, "clip_ratio must be positive"),
            (self.epochs >= 1, "epochs must be positive"),
            (self.minibatch_size >= 1, "minibatch_size must be positive"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.value_learning_rate is None or self.value_learning_rate > 0,
             "value_learning_rate must be positive"),
            (self.entropy_coef >= 0 and self.value_coef >= 0, "loss coefficients must be non-negative"),
            (self.episodes_per_iteration >= 1, "episodes_per_iteration must be positive"),
            (self.guidance_gamma is None or 0 < self.guidance_gamma <= 1, "guidance_gamma must be in (0, 1]"),
            (self.env_reward_scale > 0, "env_reward_scale must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


# --------------------------------------------------------------------- rollouts

def collect_rollouts(env, policy, episodes: int, rng: np.random.Generator | None,
                     greedy: bool = False) -> list[Trajectory]:
    """Run ``episodes`` complete episodes in lockstep.

    ``env`` is an environment instance (deep-copied per episode) or a
    zero-argument factory. Actions for all live episodes are drawn in one batch,
    in episode-index order, so results depend only on ``rng``.
    """
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    envs = [env() if callable(env) else copy.deepcopy(env) for _ in range(episodes)]
    obs = np.stack([e.reset() for e in envs])
    rec = [{"obs": [], "act": [], "rew": [], "logp": []} for _ in range(episodes)]
    done_info: list[tuple[np.ndarray, bool, bool] | None] = [None] * episodes
    live = np.arange(episodes)
    while len(live):
        actions, logp = policy.act(obs[live], rng, greedy=greedy)
        still = []
        for j, i in enumerate(live):
            r = rec[i]
            r["obs"].append(obs[i].copy())
            r["act"].append(actions[j])
            r["logp"].append(logp[j])
            try:
                o, reward, done, info = envs[i].step(actions[j])
            except Exception as exc:
                raise RuntimeError(f"environment step failed in episode {i} at step {len(r['obs']) - 1}") from exc
            r["rew"].append(reward)
            obs[i] = o
            if done:
                done_info[i] = (o.copy(), bool(info.get("terminated", False)), bool(info.get("truncated", False)))
            else:
                still.append(i)
        live = np.array(still, dtype=np.int64)
    trajs = []
    for r, (final, term, trunc) in zip(rec, done_info):
        trajs.append(Trajectory(np.array(r["obs"]), np.array(r["act"]), np.array(r["rew"], dtype=np.float64),
                                np.array(r["logp"]), final, term, trunc))
    return trajs


# -------------------------------------------------------------------- advantages

def compute_gae(rewards, values, dones, gamma: float, gae_lambda: float,
                bootstrap: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and returns-to-go.

    ``dones[t]`` marks a terminal step (next value 0, recursion restarts). The
    value after the final step, when it is not terminal, is ``bootstrap``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise ConfigError(f"length mismatch: rewards {len(rewards)}, values {len(values)}, dones {len(dones)}")
    adv = np.empty(len(rewards))
    running, next_value = 0.0, float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running, next_value = 0.0, 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * gae_lambda * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def trajectory_gae(trajs: list[Trajectory], rewards: list[np.ndarray], values: np.ndarray,
                   final_values: np.ndarray, gamma: float, gae_lambda: float):
    """GAE over a batch; truncated episodes bootstrap from their final observation's value."""
    advs, rets = [], []
    start = 0
    for traj, r, fv in zip(trajs, rewards, final_values):
        n = len(traj)
        dones = np.zeros(n, dtype=bool)
        dones[-1] = traj.terminated
        a, g = compute_gae(r, values[start:start + n], dones, gamma, gae_lambda,
                           bootstrap=0.0 if traj.terminated else fv)
        advs.append(a)
        rets.append(g)
        start += n
    return np.concatenate(advs), np.concatenate(rets)


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / (x.std() + STD_EPS)


# ----------------------------------------------------------------------- update

def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, clip_ratio: float):
    """Per-sample ``min(r A, clip(r) A)`` and its derivative w.r.t. the new log-prob."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * adv
    active = unclipped <= clipped
    obj = np.where(active, unclipped, clipped)
    return obj, np.where(active, unclipped, 0.0)


def ppo_update(policy, value_fn: ValueFunction, policy_opt: AdamState, value_opt: AdamState,
               obs: np.ndarray, actions: np.ndarray, logp_old: np.ndarray, advantages: np.ndarray,
               returns: np.ndarray, config: PpoConfig, rng: np.random.Generator) -> dict[str, float]:
    """Epochs of minibatch clipped-surrogate ascent plus value regression.

    ``advantages`` are standardized here over the whole batch.
    """
    n = len(obs)
    adv = standardize(advantages)
    sums = {"surrogate": 0.0, "value_loss": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0, "entropy": 0.0}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, config.minibatch_size):
            idx = perm[s:s + config.minibatch_size]
            m = len(idx)
            logp, ent, ctx = policy.evaluate(obs[idx], actions[idx])
            log_ratio = logp - logp_old[idx]
            ratio = np.exp(log_ratio)
            obj, d_obj = clipped_surrogate(ratio, adv[idx], config.clip_ratio)
            loss = -(obj.mean() + config.entropy_coef * ent.mean())
            if not math.isfinite(loss):
                raise DivergenceError("policy loss is not finite")
            grads = policy.backward(ctx, -d_obj / m, np.full(m, -config.entropy_coef / m))
            clip_grad_norm(grads, config.max_grad_norm)
            adam_step(policy.params, grads, policy_opt)

            v_loss, v_grads = value_fn.loss_and_grads(obs[idx], returns[idx])
            if not math.isfinite(v_loss):
                raise DivergenceError("value loss is not finite")
            for g in v_grads:
                g *= config.value_coef
            clip_grad_norm(v_grads, config.max_grad_norm)
            adam_step(value_fn.params, v_grads, value_opt)

            sums["surrogate"] += float(obj.mean())
            sums["value_loss"] += v_loss
            sums["approx_kl"] += float(np.mean(-log_ratio))
            sums["clip_fraction"] += float(np.mean(np.abs(ratio - 1.0) > config.clip_ratio))
            sums["entropy"] += float(ent.mean())
            count += 1
    return {k: v / count for k, v in sums.items()}


# ------------------------------------------------------------------------ agent

RNG_STREAMS = ("policy_init", "value_env_init", "value_guidance_init", "rollout", "env_update", "guidance_update")


@dataclass
class Agent:
    policy: CategoricalPolicy | GaussianPolicy
    value_env: ValueFunction
    value_guidance: ValueFunction
    policy_opt: AdamState
    value_env_opt: AdamState
    value_guidance_opt: AdamState
    rngs: dict[str, np.random.Generator]

    @classmethod
    def create(cls, env, config: PpoConfig, seed: int) -> "Agent":
        """Independent RNG streams per consumer, so disabling one stage never shifts another."""
        streams = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
        rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, streams)}
        low, high = env.obs_low, env.obs_high
        if env.discrete:
            policy = CategoricalPolicy.create(env.obs_dim, env.n_actions, low, high, rngs["policy_init"], config.hidden)
        else:
            policy = GaussianPolicy.create(env.obs_dim, env.act_dim, low, high, rngs["policy_init"], config.hidden)
        v_env = ValueFunction.create(env.obs_dim, low, high, rngs["value_env_init"], config.hidden)
        v_guid = ValueFunction.create(env.obs_dim, low, high, rngs["value_guidance_init"], config.hidden)
        vlr = config.value_learning_rate or config.learning_rate
        return cls(policy, v_env, v_guid,
                   AdamState.like(policy.params, learning_rate=config.learning_rate),
                   AdamState.like(v_env.params, learning_rate=vlr),
                   AdamState.like(v_guid.params, learning_rate=vlr),
                   rngs)


@dataclass
class TrainingState:
    """Everything one training run mutates across iterations."""

    env: Callable
    agent: Agent
    ppo: PpoConfig
    demos: DemoSet | None = None
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    features: FeatureMap = field(default_factory=FeatureMap)
    max_points: int = 256
    guidance_enabled: bool = True
    update_demos: bool = True
    persist_table: bool = False
    table: ImportanceTable = field(default_factory=ImportanceTable)
    iteration: int = 0

    def __post_init__(self):
        if self.guidance_enabled and not self.demos:
            raise ConfigError("guided training needs a non-empty demonstration set")
        if self.guidance_enabled and self.guidance.mode == "discrete_table":
            probe = self.env() if callable(self.env) else self.env
            if not probe.discrete:
                raise ConfigError("discrete_table guidance requires a discrete environment")

    @property
    def guidance_gamma(self) -> float:
        if self.ppo.guidance_gamma is not None:
            return self.ppo.guidance_gamma
        return 1.0 if self.guidance.mode == "discrete_table" else self.ppo.gamma


def _flatten(trajs: list[Trajectory]):
    obs = np.concatenate([t.observations for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    logp = np.concatenate([t.log_probs for t in trajs])
    finals = np.stack([t.final_observation for t in trajs])
    return obs, actions, logp, finals


def _score_buffer(state: TrainingState, trajs: list[Trajectory]) -> WeightedBuffer | None:
    if not state.demos:
        return None
    feats = demo_features(state.demos, state.features)
    return compute_weights(trajs, state.demos, state.guidance, state.kernel, state.features,
                           state.max_points, demo_feats=feats)


def _env_step(state: TrainingState, trajs, obs, actions, logp, finals) -> dict[str, float] | None:
    """PPO step on environment rewards; skipped when the batch reward is constant."""
    agent, cfg = state.agent, state.ppo
    rewards = [t.rewards * cfg.env_reward_scale for t in trajs]
    flat = np.concatenate(rewards)
    if np.all(flat == flat[0]):
        return None
    values = agent.value_env.predict(obs)
    adv, ret = trajectory_gae(trajs, rewards, values, agent.value_env.predict(finals), cfg.gamma, cfg.gae_lambda)
    return ppo_update(agent.policy, agent.value_env, agent.policy_opt, agent.value_env_opt,
                      obs, actions, logp, adv, ret, cfg, agent.rngs["env_update"])


def _guidance_rewards(state: TrainingState, wbuf: WeightedBuffer) -> list[np.ndarray]:
    if state.guidance.mode == "discrete_table":
        if not state.persist_table:
            state.table = ImportanceTable()
        accumulate_discrete(state.table, wbuf, state.guidance.key_on_state_only)
        return discrete_step_rewards(state.table, wbuf, state.guidance.key_on_state_only)
    return guidance_rewards_continuous(wbuf)


def _update_memory(state: TrainingState, trajs: list[Trajectory]) -> int:
    """Offer successful episodes, in collection order, to the demonstration memory."""
    if not (state.update_demos and state.demos is not None):
        return 0
    added = 0
    for t in trajs:
        if t.return_ > 0:
            added += state.demos.offer(DemoTrajectory.from_trajectory(t))
    return added


def _metrics(trajs, wbuf, steps: list[dict | None], state: TrainingState) -> dict[str, float]:
    done = [s for s in steps if s is not None]
    out = {
        "success_rate": float(np.mean([t.success for t in trajs])),
        "mean_return": float(np.mean([t.return_ for t in trajs])),
        "mean_length": float(np.mean([len(t) for t in trajs])),
        "mean_mmd_to_demos": float(np.mean(wbuf.distances)) if wbuf is not None else float("nan"),
    }
    for key in ("surrogate", "value_loss", "clip_fraction", "approx_kl", "entropy"):
        out[key] = float(np.mean([s[key] for s in done])) if done else 0.0
    out["env_update"] = int(steps[0] is not None)
    out["guidance_update"] = int(len(steps) > 1 and steps[1] is not None)
    out["demo_count"] = len(state.demos) if state.demos is not None else 0
    return out


def ppo_iteration(state: TrainingState) -> dict[str, float]:
    """Plain PPO on environment rewards (distances to the demos are only measured)."""
    agent = state.agent
    trajs = collect_rollouts(state.env, agent.policy, state.ppo.episodes_per_iteration, agent.rngs["rollout"])
    wbuf = _score_buffer(state, trajs)
    obs, actions, logp, finals = _flatten(trajs)
    env_stats = _env_step(state, trajs, obs, actions, logp, finals)
    metrics = _metrics(trajs, wbuf, [env_stats], state)
    metrics["guidance_raw_mean"] = metrics["guidance_raw_std"] = 0.0
    _update_memory(state, trajs)
    state.iteration += 1
    return metrics


def posg_iteration(state: TrainingState) -> dict[str, float]:
    """Collect, score against the demos, env-reward step, guidance step, refresh demos."""
    if not state.guidance_enabled:
        return ppo_iteration(state)
    agent, cfg = state.agent, state.ppo
    trajs = collect_rollouts(state.env, agent.policy, cfg.episodes_per_iteration, agent.rngs["rollout"])
    wbuf = _score_buffer(state, trajs)
    guide = _guidance_rewards(state, wbuf)
    obs, actions, logp, finals = _flatten(trajs)

    # both streams' advantages are taken before either update
    raw = np.concatenate(guide)
    scaled = scale_guidance(guide, state.guidance.reward_offset)
    guid_update = None
    if scaled is not None:
        g_adv, g_ret = trajectory_gae(trajs, scaled, agent.value_guidance.predict(obs),
                                      agent.value_guidance.predict(finals), state.guidance_gamma, cfg.gae_lambda)
        guid_update = (g_adv, g_ret)

    env_stats = _env_step(state, trajs, obs, actions, logp, finals)
    guid_stats = None
    if guid_update is not None:
        guid_stats = ppo_update(agent.policy, agent.value_guidance, agent.policy_opt, agent.value_guidance_opt,
                                obs, actions, logp, guid_update[0], guid_update[1], cfg,
                                agent.rngs["guidance_update"])
    metrics = _metrics(trajs, wbuf, [env_stats, guid_stats], state)
    metrics["guidance_raw_mean"] = float(raw.mean())
    metrics["guidance_raw_std"] = float(raw.std())
    _update_memory(state, trajs)
    state.iteration += 1
    return metrics

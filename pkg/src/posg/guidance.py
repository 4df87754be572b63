"""Dense guidance rewards built from state-only demonstrations.

A rollout buffer is scored against the demonstration memory: every trajectory
gets a weight from its MMD distance to the nearest demonstration, a joint
return mixing its own return with that demonstration's, and an importance
equal to their product. State-action pairs then receive the mean importance of
the trajectories that contain them (discrete mode) or an even per-step share of
their own trajectory's importance (continuous mode).
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .kernels import FeatureMap, KernelSpec, nearest_feature_set, traj_features

REWARD_OFFSETS = ("max", "mean")
GUIDANCE_MODES = ("discrete_table", "continuous_per_trajectory")


@dataclass
class Trajectory:
    """One complete agent episode.

    ``observations[t]`` is the observation the agent acted on at step ``t``;
    ``final_observation`` is the one reached after the last action.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray | None = None
    final_observation: np.ndarray | None = None
    terminated: bool = False
    truncated: bool = False

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.actions = np.asarray(self.actions)
        if len(self.observations) == 0:
            raise ConfigError("trajectory has no steps")
        if not len(self.observations) == len(self.actions) == len(self.rewards):
            raise ConfigError("trajectory observations, actions and rewards differ in length")

    def __len__(self):
        return len(self.rewards)

    @property
    def return_(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def success(self) -> bool:
        return self.terminated


@dataclass(frozen=True)
class DemoTrajectory:
    """A demonstration: observations and a scalar return, never actions."""

    observations: np.ndarray
    return_: float

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim != 2 or len(obs) == 0:
            raise ConfigError("demonstration needs a non-empty (T, obs_dim) observation array")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "return_", float(self.return_))

    def __len__(self):
        return len(self.observations)

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "DemoTrajectory":
        return cls(np.array(traj.observations, copy=True), traj.return_)


class DemoSet:
    """Bounded demonstration memory, kept sorted by descending return.

    Equal returns keep insertion order. A candidate enters a full memory only
    if its return strictly beats the current minimum, which is then evicted.
    """

    def __init__(self, demos: Iterable[DemoTrajectory] = (), capacity: int = 10):
        if capacity < 1:
            raise ConfigError("demo capacity must be positive")
        self.capacity = int(capacity)
        self._demos: list[DemoTrajectory] = []
        self._neg_returns: list[float] = []
        for d in demos:
            if len(self._demos) >= self.capacity:
                raise ConfigError(f"{capacity=} is smaller than the number of initial demonstrations")
            self._insert(d)

    def _insert(self, demo: DemoTrajectory):
        # bisect_right on negated returns: ties land after existing entries
        pos = bisect.bisect_right(self._neg_returns, -demo.return_)
        self._demos.insert(pos, demo)
        self._neg_returns.insert(pos, -demo.return_)

    def __len__(self):
        return len(self._demos)

    def __iter__(self):
        return iter(self._demos)

    def __getitem__(self, i) -> DemoTrajectory:
        return self._demos[i]

    @property
    def full(self) -> bool:
        return len(self._demos) >= self.capacity

    @property
    def returns(self) -> list[float]:
        return [d.return_ for d in self._demos]

    def copy(self) -> "DemoSet":
        new = DemoSet(capacity=self.capacity)
        new._demos = list(self._demos)
        new._neg_returns = list(self._neg_returns)
        return new

    def offer(self, demo: DemoTrajectory) -> bool:
        """Insert in place if admissible; returns whether the memory changed."""
        if self.full:
            if not demo.return_ > self._demos[-1].return_:
                return False
            self._demos.pop()
            self._neg_returns.pop()
        self._insert(demo)
        return True


def update_demoset(demos: DemoSet, candidate: Trajectory | DemoTrajectory) -> DemoSet:
    """Return a new memory with ``candidate`` (actions stripped) offered to it."""
    if isinstance(candidate, Trajectory):
        candidate = DemoTrajectory.from_trajectory(candidate)
    new = demos.copy()
    new.offer(candidate)
    return new


@dataclass(frozen=True)
class GuidanceParams:
    k_temp: float = 5.0
    epsilon: float = 1e-8
    alpha: float = 0.5
    beta: float | None = None
    mode: str = "discrete_table"
    key_on_state_only: bool = False
    # "max": standardized rewards are shifted so the batch maximum is 0, which
    # keeps a trajectory from earning guidance by postponing termination
    reward_offset: str = "max"

    def __post_init__(self):
        if not self.k_temp > 0:
            raise ConfigError("k_temp must be positive")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        beta = 1.0 - self.alpha if self.beta is None else float(self.beta)
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= beta <= 1.0):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if abs(self.alpha + beta - 1.0) > 1e-12:
            raise ConfigError(f"alpha + beta must equal 1, got {self.alpha} + {beta}")
        object.__setattr__(self, "beta", beta)
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"guidance mode must be one of {GUIDANCE_MODES}")
        if self.reward_offset not in REWARD_OFFSETS:
            raise ConfigError(f"reward_offset must be one of {REWARD_OFFSETS}")


@dataclass
class WeightedBuffer:
    """Rollout buffer annotated with distances, weights and importances."""

    trajectories: list[Trajectory]
    distances: np.ndarray
    nearest: np.ndarray
    weights: np.ndarray
    joint_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    importances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.trajectories)


def trajectory_weights(distances, k_temp: float, epsilon: float) -> np.ndarray:
    """``exp(-k d) / (sum exp(-k d) + eps)`` over the given buffer."""
    e = np.exp(-k_temp * np.asarray(distances, dtype=np.float64))
    denom = math.fsum(e.tolist()) + epsilon
    if denom <= 0:
        raise ConfigError("all trajectory weights underflowed; lower k_temp or set epsilon > 0")
    return e / denom


def joint_return(traj, nearest_demo, params: GuidanceParams) -> float:
    traj_ret = traj.return_ if hasattr(traj, "return_") else float(traj)
    demo_ret = nearest_demo.return_ if hasattr(nearest_demo, "return_") else float(nearest_demo)
    return params.alpha * traj_ret + params.beta * demo_ret


def trajectory_importance(weight: float, joint_ret: float) -> float:
    if weight < 0:
        raise ConfigError("trajectory weight must be non-negative")
    return weight * joint_ret


def demo_features(demos: DemoSet, g: FeatureMap) -> list[np.ndarray]:
    return [traj_features(d.observations, g) for d in demos]


def compute_weights(buffer: Sequence[Trajectory], demos: DemoSet, params: GuidanceParams,
                    kernel: KernelSpec, g: FeatureMap, max_points: int = 256,
                    demo_feats: list[np.ndarray] | None = None) -> WeightedBuffer:
    """Score every trajectory of ``buffer`` against the demonstration memory.

    Weights are normalized over exactly this buffer.
    """
    if len(buffer) == 0:
        raise ConfigError("rollout buffer is empty")
    if len(demos) == 0:
        raise ConfigError("demonstration set is empty")
    if demo_feats is None:
        demo_feats = demo_features(demos, g)
    dist = np.empty(len(buffer))
    nearest = np.empty(len(buffer), dtype=np.int64)
    for i, traj in enumerate(buffer):
        dist[i], nearest[i] = nearest_feature_set(traj_features(traj.observations, g), demo_feats,
                                                  kernel, max_points)
    weights = trajectory_weights(dist, params.k_temp, params.epsilon)
    joint = np.array([joint_return(t, demos[j], params) for t, j in zip(buffer, nearest)])
    importances = np.array([trajectory_importance(w, r) for w, r in zip(weights, joint)])
    return WeightedBuffer(list(buffer), dist, nearest, weights, joint, importances)


def _discrete_rows(obs: np.ndarray) -> list[tuple[int, ...]]:
    rounded = np.rint(obs)
    if not np.array_equal(rounded, obs):
        raise ConfigError("discrete guidance needs integer-valued observations")
    return list(map(tuple, rounded.astype(np.int64).tolist()))


def state_action_keys(traj: Trajectory, state_only: bool = False) -> list[Hashable]:
    """Per-step table keys ``(observation tuple, action)`` (or observation only)."""
    if traj.actions.ndim != 1 or not np.issubdtype(traj.actions.dtype, np.integer):
        raise ConfigError("discrete guidance needs integer action indices")
    states = _discrete_rows(np.asarray(traj.observations))
    if state_only:
        return states
    return list(zip(states, traj.actions.tolist()))


class ImportanceTable:
    """Map from state-action key to the importances of trajectories visiting it."""

    def __init__(self):
        self.entries: dict[Hashable, list[float]] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def add(self, key: Hashable, importance: float):
        self.entries.setdefault(key, []).append(float(importance))

    def mean(self, key: Hashable) -> float:
        values = self.entries[key]
        return math.fsum(values) / len(values)

    def clear(self):
        self.entries.clear()


def accumulate_discrete(table: ImportanceTable, buffer: WeightedBuffer,
                        state_only: bool = False) -> ImportanceTable:
    """Append each trajectory's importance once per distinct key it visits."""
    for traj, imp in zip(buffer.trajectories, buffer.importances):
        for key in dict.fromkeys(state_action_keys(traj, state_only)):
            table.add(key, imp)
    return table


def guidance_reward_discrete(table: ImportanceTable, key: Hashable) -> tuple[float, bool]:
    """Mean stored importance for ``key``; ``(0.0, True)`` for a cold key."""
    if key not in table:
        return 0.0, True
    return table.mean(key), False


def discrete_step_rewards(table: ImportanceTable, buffer: WeightedBuffer,
                          state_only: bool = False) -> list[np.ndarray]:
    cache: dict[Hashable, float] = {}
    out = []
    for traj in buffer.trajectories:
        r = np.empty(len(traj))
        for t, key in enumerate(state_action_keys(traj, state_only)):
            if key not in cache:
                cache[key] = guidance_reward_discrete(table, key)[0]
            r[t] = cache[key]
        out.append(r)
    return out


def guidance_rewards_continuous(buffer: WeightedBuffer) -> list[np.ndarray]:
    """Every step of a trajectory gets ``importance / length``."""
    return [np.full(len(t), imp / len(t)) for t, imp in zip(buffer.trajectories, buffer.importances)]


def scale_guidance(rewards: list[np.ndarray], offset: str = "max") -> list[np.ndarray] | None:
    """Batch z-score of per-step guidance rewards; ``None`` when they are all equal.

    With ``offset="max"`` the z-scores are shifted down by their maximum so every
    step reward is ``<= 0``.
    """
    flat = np.concatenate(rewards)
    if np.all(flat == flat[0]):
        return None
    center = flat.max() if offset == "max" else flat.mean()
    scale = flat.std() + 1e-8
    return [(r - center) / scale for r in rewards]

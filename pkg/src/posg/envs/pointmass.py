"""Sparse-reward 2-D point-mass navigation with continuous actions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation, MalformedInputError

GOAL_REWARD = 100.0


@dataclass(frozen=True)
class PointMassState:
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    step_count: int = 0


class PointMass:
    """Double integrator in ``[-bound, bound]^2``.

    Each step: ``v += accel * clip(a, -1, 1)`` with ``|v| <= v_max``, then
    ``p += v`` clipped to the arena. Wall contact leaves the velocity alone, so
    the agent stays pinned until it accelerates away. Reaching within ``goal_radius`` of the goal pays 100 and
    ends the episode. Observations are ``(x, y, vx, vy)``.
    """

    discrete = False
    obs_dim = 4
    act_dim = 2
    max_return = GOAL_REWARD

    def __init__(self, start=(-9.0, -9.0), goal=(5.0, 5.0), goal_radius: float = 0.5,
                 max_steps: int = 500, v_max: float = 1.0, accel: float = 0.1, bound: float = 10.0,
                 env_id: str = "pointmass"):
        self.start = np.asarray(start, dtype=np.float64)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.goal_radius = float(goal_radius)
        self.max_steps = int(max_steps)
        self.v_max = float(v_max)
        self.accel = float(accel)
        self.bound = float(bound)
        self.env_id = env_id
        self.obs_low = np.array([-bound, -bound, -v_max, -v_max])
        self.obs_high = np.array([bound, bound, v_max, v_max])
        self.pos = self.start.copy()
        self.vel = np.zeros(2)
        self.steps = 0
        self.done = True

    @property
    def state(self) -> PointMassState:
        return PointMassState(tuple(self.pos), tuple(self.vel), self.steps)

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.pos = self.start.copy()
        self.vel = np.zeros(2)
        self.steps = 0
        self.done = False
        return self._obs()

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset() first")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise MalformedInputError(f"action must be two finite numbers, got {action!r}")
        a = np.clip(a, -1.0, 1.0)
        vel = self.vel + self.accel * a
        speed = float(np.hypot(vel[0], vel[1]))
        if speed > self.v_max:
            vel *= self.v_max / speed
        pos = np.clip(self.pos + vel, -self.bound, self.bound)
        self.pos, self.vel = pos, vel
        self.steps += 1
        terminated = bool(np.hypot(*(pos - self.goal)) < self.goal_radius)
        truncated = not terminated and self.steps >= self.max_steps
        self.done = terminated or truncated
        reward = GOAL_REWARD if terminated else 0.0
        return self._obs(), reward, self.done, {"terminated": terminated, "truncated": truncated}

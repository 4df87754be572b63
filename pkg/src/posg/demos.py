"""State-only demonstration generation and JSON Lines storage.

Records hold observations and a scalar return. Action data is rejected on load
and never written.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .envs import KdtLayout, KeyDoorTreasure, PointMass
from .envs.kdt import MOVES
from .errors import ConfigError, LayoutError, MalformedInputError, StateOnlyViolation
from .guidance import DemoSet, DemoTrajectory

RECORD_KEYS = ("env_id", "quality", "seed", "return", "observations")
FORBIDDEN_KEYS = ("actions", "action")


@dataclass(frozen=True)
class DemoFileRecord:
    observations: tuple[tuple[float, ...], ...]
    return_: float
    quality_tag: str = "expert"
    env_id: str = "kdt"
    generator_seed: int = 0

    def __post_init__(self):
        obs = tuple(tuple(float(v) for v in row) for row in self.observations)
        if not obs:
            raise MalformedInputError("demonstration record has no observations")
        if len({len(row) for row in obs}) != 1:
            raise MalformedInputError("observation rows differ in dimension")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "return_", float(self.return_))

    def __len__(self):
        return len(self.observations)

    def to_demo(self) -> DemoTrajectory:
        return DemoTrajectory(np.array(self.observations, dtype=np.float64), self.return_)

    def to_json(self) -> str:
        payload = {
            "env_id": self.env_id,
            "quality": self.quality_tag,
            "seed": self.generator_seed,
            "return": self.return_,
            "observations": [list(row) for row in self.observations],
        }
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "DemoFileRecord":
        bad = [k for k in FORBIDDEN_KEYS if k in data]
        if bad:
            raise StateOnlyViolation(f"record carries action data ({bad[0]!r}); demonstrations are state-only")
        missing = [k for k in RECORD_KEYS if k not in data]
        if missing:
            raise MalformedInputError(f"record is missing {missing}")
        return cls(data["observations"], data["return"], str(data["quality"]), str(data["env_id"]), int(data["seed"]))


# ---------------------------------------------------------------- key-door-treasure

class KdtExpert:
    """Greedy descent on BFS distance maps: to the key, then the door, then the treasure.

    Among several shortest-path moves the first in east/west/south/north order
    is taken, or a uniformly random one when ``rng`` is given.
    """

    def __init__(self, layout: KdtLayout, rng: np.random.Generator | None = None):
        self.layout = layout
        self.rng = rng
        self.maps = (
            layout.distance_map(layout.key, door_passable=False),
            layout.distance_map(layout.door, door_passable=True),
            layout.distance_map(layout.treasure, door_passable=True),
        )

    def action(self, obs: np.ndarray) -> int:
        r, c, has_key, door_open = (int(v) for v in obs)
        dist = self.maps[0 if not has_key else (1 if not door_open else 2)]
        here = dist[r, c]
        if here < 0:
            raise LayoutError(f"no path from cell {(r, c)} to the current subgoal")
        best = []
        for a, (dr, dc) in enumerate(MOVES):
            nr, nc = r + dr, c + dc
            if 0 <= nr < dist.shape[0] and 0 <= nc < dist.shape[1] and dist[nr, nc] == here - 1:
                best.append(a)
        if self.rng is None or len(best) == 1:
            return best[0]
        return best[int(self.rng.integers(len(best)))]


def _run_kdt(layout: KdtLayout, choose) -> tuple[list[np.ndarray], float]:
    env = KeyDoorTreasure(layout)
    obs = env.reset()
    observations, ret, done = [], 0.0, False
    while not done:
        observations.append(obs)
        obs, reward, done, _ = env.step(choose(obs))
        ret += reward
    return observations, ret


def scripted_expert_kdt(layout: KdtLayout, seed: int | None = None, env_id: str = "kdt") -> DemoFileRecord:
    expert = KdtExpert(layout, None if seed is None else np.random.default_rng(seed))
    obs, ret = _run_kdt(layout, expert.action)
    if ret <= 0:
        raise LayoutError("scripted expert did not reach the treasure within max_steps")
    return DemoFileRecord(obs, ret, "expert", env_id, -1 if seed is None else seed)


def scripted_medium_kdt(layout: KdtLayout, noise: float, seed: int, env_id: str = "kdt") -> DemoFileRecord:
    """Expert with a random action taken with probability ``noise`` at every step."""
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("noise must be in [0, 1]")
    expert = KdtExpert(layout, np.random.default_rng(seed))
    noise_rng = np.random.default_rng([seed, 1])

    def choose(obs):
        if noise > 0 and noise_rng.random() < noise:
            return int(noise_rng.integers(4))
        return expert.action(obs)

    obs, ret = _run_kdt(layout, choose)
    return DemoFileRecord(obs, ret, "medium" if noise > 0 else "expert", env_id, seed)


# ------------------------------------------------------------------------ point mass

def _run_pointmass(env: PointMass, choose) -> tuple[list[np.ndarray], float]:
    obs = env.reset()
    observations, ret, done = [], 0.0, False
    while not done:
        observations.append(obs)
        obs, reward, done, _ = env.step(choose(obs))
        ret += reward
    return observations, ret


def scripted_expert_pointmass(env: PointMass, seed: int = 0) -> DemoFileRecord:
    """Proportional controller ``clip(goal - position, -1, 1)``."""
    obs, ret = _run_pointmass(env, lambda o: np.clip(env.goal - o[:2], -1.0, 1.0))
    return DemoFileRecord(obs, ret, "expert", env.env_id, seed)


def scripted_medium_pointmass(env: PointMass, seed: int, noise_std: float = 0.3) -> DemoFileRecord:
    rng = np.random.default_rng(seed)
    obs, ret = _run_pointmass(env, lambda o: np.clip(env.goal - o[:2], -1.0, 1.0) + noise_std * rng.standard_normal(2))
    return DemoFileRecord(obs, ret, "medium", env.env_id, seed)


def generate_demos(env, quality: str, count: int, seed: int = 0, noise: float = 0.5) -> list[DemoFileRecord]:
    """``count`` records for an environment instance; record ``i`` uses seed ``seed + i``."""
    if count < 1:
        raise ConfigError("count must be positive")
    if quality not in ("expert", "medium"):
        raise ConfigError(f"quality must be 'expert' or 'medium', got {quality!r}")
    records = []
    for i in range(count):
        s = seed + i
        if isinstance(env, KeyDoorTreasure):
            if quality == "expert":
                rec = scripted_expert_kdt(env.layout, s, env.env_id)
            else:
                rec = scripted_medium_kdt(env.layout, noise, s, env.env_id)
        elif isinstance(env, PointMass):
            rec = scripted_expert_pointmass(env, s) if quality == "expert" else scripted_medium_pointmass(env, s)
        else:
            raise ConfigError(f"no scripted demonstrator for {type(env).__name__}")
        records.append(rec)
    return records


# ----------------------------------------------------------------------------- I/O

def save_demos(path: str | Path, records: Iterable[DemoFileRecord]):
    lines = [r.to_json() for r in records]
    if not lines:
        raise ConfigError("refusing to write an empty demonstration file")
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path: str | Path) -> list[DemoFileRecord]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedInputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(data, dict):
                raise MalformedInputError(f"{path}:{lineno}: record must be a JSON object")
            try:
                records.append(DemoFileRecord.from_dict(data))
            except StateOnlyViolation as exc:
                raise StateOnlyViolation(f"{path}:{lineno}: {exc}") from None
            except (MalformedInputError, TypeError, ValueError) as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise ConfigError(f"{path}: demonstration file is empty")
    return records


def to_demoset(records: Iterable[DemoFileRecord], capacity: int = 10) -> DemoSet:
    return DemoSet([r.to_demo() for r in records], capacity=capacity)

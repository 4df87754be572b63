"""Key-Door-Treasure grid world.

The agent must pick up the key, open the door with it and then reach the
treasure. Reaching the treasure pays 200 and ends the episode; every other
transition pays nothing.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, LayoutError, MalformedInputError

TREASURE_REWARD = 200.0
# east, west, south, north; rows grow downwards
MOVES = ((0, 1), (0, -1), (1, 0), (-1, 0))
ACTION_NAMES = ("east", "west", "south", "north")

_SYMBOLS = {"#", ".", "K", "D", "T", "S"}


@dataclass(frozen=True)
class KdtState:
    agent_cell: tuple[int, int]
    has_key: bool = False
    door_open: bool = False
    step_count: int = 0


@dataclass(frozen=True)
class KdtLayout:
    walls: np.ndarray
    start: tuple[int, int]
    key: tuple[int, int]
    door: tuple[int, int]
    treasure: tuple[int, int]
    max_steps: int = 240

    def __post_init__(self):
        self.walls.setflags(write=False)
        cells = {"start": self.start, "key": self.key, "door": self.door, "treasure": self.treasure}
        if len(set(cells.values())) != 4:
            raise LayoutError("start, key, door and treasure must be distinct cells")
        for name, cell in cells.items():
            if not (0 <= cell[0] < self.height and 0 <= cell[1] < self.width):
                raise LayoutError(f"{name} cell {cell} outside the grid")
            if self.walls[cell]:
                raise LayoutError(f"{name} cell {cell} is a wall")
        if self.max_steps < 1:
            raise LayoutError("max_steps must be positive")
        for src, dst, door_passable, name in (
            (self.start, self.key, False, "key"),
            (self.key, self.door, True, "door"),
            (self.door, self.treasure, True, "treasure"),
        ):
            if self.distance_map(dst, door_passable)[src] < 0:
                raise LayoutError(f"{name} is unreachable")

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    @classmethod
    def parse(cls, text: str, max_steps: int = 240) -> "KdtLayout":
        rows = [line.rstrip("\r") for line in text.splitlines() if line.strip()]
        if not rows:
            raise LayoutError("empty layout")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise LayoutError("layout rows differ in length")
        found: dict[str, list[tuple[int, int]]] = {c: [] for c in "KDTS"}
        walls = np.zeros((len(rows), width), dtype=bool)
        for r, line in enumerate(rows):
            for c, ch in enumerate(line):
                if ch not in _SYMBOLS:
                    raise LayoutError(f"unknown layout symbol {ch!r} at row {r}, col {c}")
                if ch == "#":
                    walls[r, c] = True
                elif ch in found:
                    found[ch].append((r, c))
        for ch, where in found.items():
            if len(where) != 1:
                raise LayoutError(f"layout needs exactly one {ch!r}, found {len(where)}")
        return cls(walls, found["S"][0], found["K"][0], found["D"][0], found["T"][0], max_steps)

    @classmethod
    def load(cls, path: str | Path, max_steps: int = 240) -> "KdtLayout":
        return cls.parse(Path(path).read_text(), max_steps)

    @classmethod
    def builtin(cls, name: str, max_steps: int = 240) -> "KdtLayout":
        text = resources.files("posg.envs").joinpath("layouts", f"{name}.txt").read_text()
        return cls.parse(text, max_steps)

    def to_text(self) -> str:
        grid = [["#" if w else "." for w in row] for row in self.walls]
        for (r, c), ch in ((self.start, "S"), (self.key, "K"), (self.door, "D"), (self.treasure, "T")):
            grid[r][c] = ch
        return "\n".join("".join(row) for row in grid) + "\n"

    def blocked(self, cell: tuple[int, int], door_passable: bool) -> bool:
        r, c = cell
        if not (0 <= r < self.height and 0 <= c < self.width) or self.walls[r, c]:
            return True
        return cell == self.door and not door_passable

    def distance_map(self, target: tuple[int, int], door_passable: bool) -> np.ndarray:
        """BFS step counts to ``target`` (-1 where unreachable)."""
        dist = np.full(self.shape, -1, dtype=np.int64)
        dist[target] = 0
        queue = deque([target])
        while queue:
            r, c = queue.popleft()
            for dr, dc in MOVES:
                nxt = (r + dr, c + dc)
                if not self.blocked(nxt, door_passable) and dist[nxt] < 0:
                    dist[nxt] = dist[r, c] + 1
                    queue.append(nxt)
        return dist


def kdt_observation(state: KdtState) -> np.ndarray:
    r, c = state.agent_cell
    return np.array([r, c, float(state.has_key), float(state.door_open)], dtype=np.float64)


def kdt_transition(layout: KdtLayout, state: KdtState, action: int) -> tuple[KdtState, float, bool, bool]:
    """Pure transition. Returns ``(next_state, reward, terminated, truncated)``."""
    if not 0 <= int(action) < 4:
        raise MalformedInputError(f"action must be in 0..3, got {action}")
    dr, dc = MOVES[int(action)]
    r, c = state.agent_cell
    nxt = (r + dr, c + dc)
    has_key, door_open = state.has_key, state.door_open
    if layout.blocked(nxt, door_passable=door_open or has_key):
        nxt = (r, c)
    if nxt == layout.key:
        has_key = True
    if nxt == layout.door and has_key:
        door_open = True
    steps = state.step_count + 1
    new = KdtState(nxt, has_key, door_open, steps)
    if nxt == layout.treasure:
        return new, TREASURE_REWARD, True, False
    return new, 0.0, False, steps >= layout.max_steps


class KeyDoorTreasure:
    """Episodic wrapper around :func:`kdt_transition`.

    Observations are ``(row, col, has_key, door_open)`` as floats.
    """

    discrete = True
    n_actions = 4
    obs_dim = 4
    max_return = TREASURE_REWARD

    def __init__(self, layout: KdtLayout, env_id: str = "kdt"):
        self.layout = layout
        self.env_id = env_id
        self.state: KdtState | None = None
        self.done = True
        self.obs_low = np.array([0.0, 0.0, 0.0, 0.0])
        self.obs_high = np.array([layout.height - 1, layout.width - 1, 1.0, 1.0], dtype=np.float64)

    @property
    def max_steps(self) -> int:
        return self.layout.max_steps

    def reset(self, seed: int | None = None) -> np.ndarray:
        # the dynamics are deterministic; seed is accepted for interface parity
        self.state = KdtState(self.layout.start)
        self.done = False
        return kdt_observation(self.state)

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset() first")
        self.state, reward, terminated, truncated = kdt_transition(self.layout, self.state, action)
        self.done = terminated or truncated
        return kdt_observation(self.state), reward, self.done, {"terminated": terminated, "truncated": truncated}

    def with_state(self, state: KdtState) -> "KeyDoorTreasure":
        self.state = replace(state)
        self.done = False
        return self

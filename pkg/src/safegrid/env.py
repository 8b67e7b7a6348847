"""Seeded grid world with reward entities, walkable cost entities and egocentric views.

Coordinates are ``(row, col)`` with row 0 at the top. Every operation on an
:class:`EpisodeState` returns a fresh state; states are never mutated.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import FrozenSet, Iterable, Mapping, Optional, Tuple

import numpy as np

Cell = Tuple[int, int]

VIEW_SIZE = 7
VIEW_RADIUS = VIEW_SIZE // 2


class Entity(IntEnum):
    EMPTY = 0
    WALL = 1
    BALL = 2
    BOX = 3
    KEY = 4
    LAVA = 5
    WATER = 6
    GRASS = 7


N_KINDS = len(Entity)
REWARD_ENTITIES = (Entity.BALL, Entity.BOX, Entity.KEY)
COST_ENTITIES = (Entity.LAVA, Entity.WATER, Entity.GRASS)

ENTITY_NAMES = {e: e.name.lower() for e in Entity}
ENTITY_BY_NAME = {v: k for k, v in ENTITY_NAMES.items()}


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


N_ACTIONS = len(Action)
# (d_row, d_col) per action, indexed by Action value
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)

CELL_CHARS = {
    Entity.EMPTY: ".",
    Entity.WALL: "W",
    Entity.BALL: "B",
    Entity.BOX: "X",
    Entity.KEY: "K",
    Entity.LAVA: "L",
    Entity.WATER: "~",
    Entity.GRASS: "G",
}
CHAR_CELLS = {c: e for e, c in CELL_CHARS.items()}


class PlacementError(ValueError):
    """Raised when the requested entities do not fit in the map interior."""


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an episode that is already done."""


@dataclass(frozen=True)
class GenConfig:
    grid_size: int = 13
    cost_entity_kinds: FrozenSet[Entity] = frozenset(COST_ENTITIES)
    cells_per_cost_kind: int = 6

    def __post_init__(self):
        object.__setattr__(self, "cost_entity_kinds", frozenset(Entity(k) for k in self.cost_entity_kinds))
        if self.grid_size < 5:
            raise ValueError(f"grid_size must be >= 5, got {self.grid_size}")
        if self.cells_per_cost_kind < 0:
            raise ValueError("cells_per_cost_kind must be non-negative")
        bad = [k for k in self.cost_entity_kinds if k not in COST_ENTITIES]
        if bad:
            raise ValueError(f"not cost entities: {bad}")


@dataclass(frozen=True)
class RewardTable:
    rewards: Mapping[Entity, float]
    max_steps: int = 200
    step_penalty: float = 0.0

    def __post_init__(self):
        missing = [e for e in REWARD_ENTITIES if e not in self.rewards]
        if missing:
            raise ValueError(f"reward table misses {missing}")

    def reward_of(self, kind: Entity) -> float:
        return float(self.rewards.get(kind, 0.0))

    def as_array(self) -> np.ndarray:
        """Per-kind reward lookup indexed by Entity value."""
        out = np.zeros(N_KINDS)
        for e in REWARD_ENTITIES:
            out[e] = self.rewards[e]
        return out


def train_rewards(max_steps: int = 200) -> RewardTable:
    return RewardTable({Entity.BALL: 1.0, Entity.BOX: 2.0, Entity.KEY: 3.0}, max_steps=max_steps)


def eval_rewards(max_steps: int = 200) -> RewardTable:
    return RewardTable({Entity.BALL: 1.0, Entity.BOX: 2.0, Entity.KEY: -3.0}, max_steps=max_steps)


@dataclass(frozen=True, eq=False)
class GridMap:
    cells: np.ndarray
    agent_start: Cell
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (
            np.array_equal(self.cells, other.cells)
            and tuple(self.agent_start) == tuple(other.agent_start)
            and self.seed == other.seed
        )

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    def to_text(self) -> str:
        rows = []
        for r in range(self.size):
            row = [CELL_CHARS[Entity(v)] for v in self.cells[r]]
            if r == self.agent_start[0]:
                row[self.agent_start[1]] = "A"
            rows.append("".join(row))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, seed: int = 0) -> "GridMap":
        rows = [line for line in text.splitlines() if line.strip()]
        size = len(rows)
        if any(len(r) != size for r in rows):
            raise ValueError("map text must be square")
        cells = np.zeros((size, size), dtype=np.int8)
        start = None
        for r, line in enumerate(rows):
            for c, ch in enumerate(line):
                if ch == "A":
                    start = (r, c)
                    cells[r, c] = Entity.EMPTY
                elif ch in CHAR_CELLS:
                    cells[r, c] = CHAR_CELLS[ch]
                else:
                    raise ValueError(f"unknown map character {ch!r} at row {r}, col {c}")
        if start is None:
            raise ValueError("map text has no agent start 'A'")
        return cls(cells, start, seed)


def generate_map(seed: int, config: GenConfig = GenConfig()) -> GridMap:
    """Place one of each reward entity, the cost cells and the agent start.

    All placements are distinct interior cells drawn from a generator seeded
    by ``seed`` only, so the map is a pure function of ``(seed, config)``.
    """
    n = config.grid_size
    kinds = sorted(config.cost_entity_kinds)
    interior = [(r, c) for r in range(1, n - 1) for c in range(1, n - 1)]
    needed = len(REWARD_ENTITIES) + len(kinds) * config.cells_per_cost_kind + 1
    if needed > len(interior):
        raise PlacementError(
            f"{needed} placements requested but only {len(interior)} interior cells in a {n}x{n} map"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(interior))[:needed]
    picks = [interior[i] for i in order]

    cells = np.full((n, n), Entity.EMPTY, dtype=np.int8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = Entity.WALL
    it = iter(picks)
    for e in REWARD_ENTITIES:
        cells[next(it)] = e
    for k in kinds:
        for _ in range(config.cells_per_cost_kind):
            cells[next(it)] = k
    start = next(it)
    return GridMap(cells, start, int(seed))


@dataclass(frozen=True, eq=False)
class EpisodeState:
    grid_map: GridMap
    cells: np.ndarray
    agent_pos: Cell
    step_count: int = 0
    visited_kinds: FrozenSet[Entity] = field(default_factory=frozenset)
    cumulative_cost: float = 0.0
    remaining_rewards: FrozenSet[Entity] = frozenset(REWARD_ENTITIES)
    max_steps: int = 200

    @property
    def done(self) -> bool:
        return not self.remaining_rewards or self.step_count >= self.max_steps

    def with_cost(self, cost: float) -> "EpisodeState":
        return replace(self, cumulative_cost=self.cumulative_cost + cost)


def reset(grid_map: GridMap, max_steps: int = 200) -> EpisodeState:
    remaining = frozenset(e for e in REWARD_ENTITIES if (grid_map.cells == e).any())
    return EpisodeState(
        grid_map=grid_map,
        cells=grid_map.cells.copy(),
        agent_pos=tuple(grid_map.agent_start),
        remaining_rewards=remaining,
        max_steps=max_steps,
    )


@dataclass(frozen=True)
class StepEvents:
    entered_kind: Entity
    collected: Optional[Entity]
    done: bool
    moved: bool


def step(state: EpisodeState, action: int, rewards: RewardTable) -> Tuple[EpisodeState, float, StepEvents]:
    if state.done:
        raise EpisodeFinishedError(f"episode finished at step {state.step_count}")
    dr, dc = MOVES[Action(action)]
    r, c = state.agent_pos
    target = (r + int(dr), c + int(dc))
    kind = Entity(state.cells[target])
    reward = -rewards.step_penalty
    collected = None
    cells = state.cells
    remaining = state.remaining_rewards
    visited = state.visited_kinds
    if kind == Entity.WALL:
        pos, moved = (r, c), False
        entered = Entity(state.cells[r, c])
    else:
        pos, moved = target, True
        entered = kind
        visited = visited | {kind}
        if kind in REWARD_ENTITIES:
            collected = kind
            reward += rewards.reward_of(kind)
            cells = cells.copy()
            cells[target] = Entity.EMPTY
            remaining = remaining - {kind}
    nxt = replace(
        state,
        cells=cells,
        agent_pos=pos,
        step_count=state.step_count + 1,
        visited_kinds=visited,
        remaining_rewards=remaining,
    )
    return nxt, reward, StepEvents(entered, collected, nxt.done, moved)


def crop(cells: np.ndarray, pos: Cell, size: int = VIEW_SIZE) -> np.ndarray:
    """Egocentric ``size x size`` window around ``pos``; off-grid cells read as wall."""
    rad = size // 2
    padded = np.pad(cells, rad, constant_values=Entity.WALL)
    r, c = pos
    return padded[r : r + size, c : c + size].copy()


def observe(state: EpisodeState) -> np.ndarray:
    return crop(state.cells, state.agent_pos)


def visited_indicator(visited_kinds: Iterable[Entity]) -> np.ndarray:
    """Binary vector over the cost entities, in COST_ENTITIES order."""
    visited = set(visited_kinds)
    return np.array([1.0 if k in visited else 0.0 for k in COST_ENTITIES])

"""Batched copy of the grid world for fast rollouts.

Semantics match :func:`safegrid.env.step` and :func:`safegrid.constraints.step_cost`
exactly; tests replay the same action sequences through both.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .constraints import Budgetary, ConstraintSpec, Relational, Sequential
from .env import (
    COST_ENTITIES,
    MOVES,
    N_KINDS,
    REWARD_ENTITIES,
    VIEW_RADIUS,
    VIEW_SIZE,
    Entity,
    GridMap,
    RewardTable,
)

_PAD = VIEW_RADIUS
_WIN = np.arange(VIEW_SIZE)
_COST_INDEX = {k: i for i, k in enumerate(COST_ENTITIES)}


def _dilate(hits: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Manhattan dilation of (N, H, W) boolean grids by a per-row radius."""
    out = hits.copy()
    cur = hits.copy()
    for r in range(1, int(radius.max(initial=0)) + 1):
        nxt = cur.copy()
        nxt[:, 1:, :] |= cur[:, :-1, :]
        nxt[:, :-1, :] |= cur[:, 1:, :]
        nxt[:, :, 1:] |= cur[:, :, :-1]
        nxt[:, :, :-1] |= cur[:, :, 1:]
        cur = nxt
        sel = radius >= r
        out[sel] = cur[sel]
    return out


def spec_arrays(specs: Sequence[ConstraintSpec]):
    """Per-spec (kind, entity, distance, trigger) integer columns; kind 0/1/2 = budget/relation/sequence."""
    kind = np.zeros(len(specs), dtype=np.int64)
    ent = np.zeros(len(specs), dtype=np.int64)
    dist = np.zeros(len(specs), dtype=np.int64)
    trig = np.full(len(specs), -1, dtype=np.int64)
    for i, s in enumerate(specs):
        if isinstance(s, Budgetary):
            kind[i], ent[i] = 0, s.entity
        elif isinstance(s, Relational):
            kind[i], ent[i], dist[i] = 1, s.entity, s.distance
        elif isinstance(s, Sequential):
            kind[i], ent[i], trig[i] = 2, s.forbidden, s.trigger
        else:
            raise TypeError(f"not a constraint spec: {s!r}")
    return kind, ent, dist, trig


def batch_masks(specs: Sequence[ConstraintSpec], obs: np.ndarray, visited: np.ndarray) -> np.ndarray:
    """Ground-truth masks for N (spec, window, visited-indicator) triples at once.

    ``visited`` is the (N, 3) indicator over COST_ENTITIES.
    """
    obs = np.asarray(obs)
    kind, ent, dist, trig = spec_arrays(specs)
    hits = obs == ent[:, None, None]
    out = hits.copy()
    rel = kind == 1
    if rel.any():
        out[rel] = _dilate(hits[rel], dist[rel])
    seq = kind == 2
    if seq.any():
        trig_idx = np.array([_COST_INDEX[Entity(t)] for t in trig[seq]])
        fired = np.asarray(visited)[seq, trig_idx] > 0
        out[seq] = hits[seq] & fired[:, None, None]
    return out.astype(np.int8)


class VecHazardWorld:
    """``n`` independent episodes of equal grid size stepped in lock-step."""

    def __init__(self, n: int, grid_size: int, rewards: RewardTable, max_specs: int = 1):
        self.n = n
        self.size = grid_size
        self.rewards = rewards
        self.reward_lookup = rewards.as_array()
        self.max_specs = max_specs
        s = grid_size + 2 * _PAD
        self.cells = np.full((n, s, s), Entity.WALL, dtype=np.int8)
        self.pos = np.zeros((n, 2), dtype=np.int64)
        self.steps = np.zeros(n, dtype=np.int64)
        self.max_steps = np.full(n, rewards.max_steps, dtype=np.int64)
        self.visited = np.zeros((n, N_KINDS), dtype=bool)
        self.remaining = np.zeros(n, dtype=np.int64)
        # cost structures, in padded coordinates
        self.entry = np.zeros((n, max_specs, s, s), dtype=bool)
        self.near = np.zeros((n, max_specs, s, s), dtype=bool)
        self.trigger = np.full((n, max_specs), -1, dtype=np.int64)

    def reset(self, i: int, grid_map: GridMap, specs: Sequence[ConstraintSpec], max_steps: int | None = None):
        if grid_map.size != self.size:
            raise ValueError(f"map size {grid_map.size} != env size {self.size}")
        if len(specs) > self.max_specs:
            raise ValueError(f"{len(specs)} specs exceed capacity {self.max_specs}")
        p = _PAD
        self.cells[i] = Entity.WALL
        self.cells[i, p : p + self.size, p : p + self.size] = grid_map.cells
        self.pos[i] = np.asarray(grid_map.agent_start) + p
        self.steps[i] = 0
        self.max_steps[i] = self.rewards.max_steps if max_steps is None else max_steps
        self.visited[i] = False
        self.remaining[i] = sum(int((grid_map.cells == e).any()) for e in REWARD_ENTITIES)
        self.entry[i] = False
        self.near[i] = False
        self.trigger[i] = -1
        inner = self.cells[i]
        for k, spec in enumerate(specs):
            if isinstance(spec, Budgetary):
                self.entry[i, k] = inner == spec.entity
            elif isinstance(spec, Sequential):
                self.entry[i, k] = inner == spec.forbidden
                self.trigger[i, k] = spec.trigger
            else:
                grid = (inner == spec.entity)[None]
                self.near[i, k] = _dilate(grid, np.array([spec.distance]))[0]

    @property
    def done(self) -> np.ndarray:
        return (self.remaining == 0) | (self.steps >= self.max_steps)

    def observe(self, idx: np.ndarray) -> np.ndarray:
        r = self.pos[idx, 0][:, None, None] - _PAD + _WIN[None, :, None]
        c = self.pos[idx, 1][:, None, None] - _PAD + _WIN[None, None, :]
        return self.cells[np.asarray(idx)[:, None, None], r, c]

    def visited_indicator(self, idx: np.ndarray) -> np.ndarray:
        return self.visited[np.ix_(np.asarray(idx), list(COST_ENTITIES))].astype(float)

    def step(self, idx: np.ndarray, actions: np.ndarray):
        """Advance envs ``idx``.

        Returns (reward, per-spec oracle cost of shape (k, max_specs), moved, done) for those rows.
        """
        idx = np.asarray(idx)
        if np.any(self.done[idx]):
            raise RuntimeError("stepping a finished episode")
        prev_visited = self.visited[idx].copy()
        target = self.pos[idx] + MOVES[np.asarray(actions)]
        kind = self.cells[idx, target[:, 0], target[:, 1]]
        moved = kind != Entity.WALL
        new = np.where(moved[:, None], target, self.pos[idx])
        self.pos[idx] = new
        self.steps[idx] += 1

        entered = kind.astype(np.int64)
        mv = idx[moved]
        self.visited[mv, entered[moved]] = True
        reward = np.where(moved, self.reward_lookup[entered], 0.0) - self.rewards.step_penalty
        is_reward = moved & np.isin(entered, list(REWARD_ENTITIES))
        got = idx[is_reward]
        self.cells[got, new[is_reward, 0], new[is_reward, 1]] = Entity.EMPTY
        self.remaining[got] -= 1

        rows = np.arange(len(idx))
        cost = np.zeros((len(idx), self.max_specs))
        for k in range(self.max_specs):
            trig = self.trigger[idx, k]
            fired = (trig < 0) | prev_visited[rows, np.maximum(trig, 0)]
            entry = self.entry[idx, k, new[:, 0], new[:, 1]] & moved & fired
            near = self.near[idx, k, new[:, 0], new[:, 1]]
            cost[:, k] = entry | near
        return reward, cost, moved, self.done[idx]

    def destination_in_window(self, idx: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Window coordinates (row, col) of the cell each agent would occupy after ``actions``."""
        idx = np.asarray(idx)
        target = self.pos[idx] + MOVES[np.asarray(actions)]
        blocked = self.cells[idx, target[:, 0], target[:, 1]] == Entity.WALL
        center = np.full((len(idx), 2), VIEW_RADIUS)
        return np.where(blocked[:, None], center, center + MOVES[np.asarray(actions)])

"""Independent reference implementations used as test oracles.

Nothing here imports the code under test beyond plain enums and data types;
each routine is written from the English definition with explicit loops.
"""
from __future__ import annotations

import itertools
from collections import deque

import numpy as np

from safegrid.constraints import Budgetary, Relational, Sequential
from safegrid.env import Entity

WALL = int(Entity.WALL)
REWARD_KINDS = {int(Entity.BALL), int(Entity.BOX), int(Entity.KEY)}
STEP = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}


def brute_crop(cells, pos, size=7):
    """Window around pos, reading wall outside the grid, one cell at a time."""
    n = len(cells)
    rad = size // 2
    out = np.full((size, size), WALL, dtype=int)
    for i in range(size):
        for j in range(size):
            r, c = pos[0] - rad + i, pos[1] - rad + j
            if 0 <= r < n and 0 <= c < n:
                out[i, j] = cells[r][c]
    return out


def bfs_distance(cells, start, kind):
    """Shortest 4-connected path length from start to any cell of ``kind``, walls ignored."""
    n = len(cells)
    seen = {tuple(start)}
    queue = deque([(tuple(start), 0)])
    while queue:
        (r, c), d = queue.popleft()
        if cells[r][c] == kind:
            return d
        for dr, dc in STEP.values():
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < n and 0 <= nxt[1] < n and nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, d + 1))
    return None


def replay_cost(grid_map, actions, spec, max_steps=200):
    """Total cost of an action sequence, counted straight from the constraint definitions.

    Stops at the same point the environment would: all rewards gone or the
    step limit reached.
    """
    cells = [list(map(int, row)) for row in grid_map.cells]
    r, c = grid_map.agent_start
    remaining = sum(1 for row in cells for v in row if v in REWARD_KINDS)
    visited = set()
    total = 0
    for t, a in enumerate(actions):
        if remaining == 0 or t >= max_steps:
            break
        dr, dc = STEP[int(a)]
        before = set(visited)
        nr, nc = r + dr, c + dc
        moved = cells[nr][nc] != WALL
        if moved:
            r, c = nr, nc
            visited.add(cells[r][c])
            if cells[r][c] in REWARD_KINDS:
                cells[r][c] = int(Entity.EMPTY)
                remaining -= 1
        if isinstance(spec, Budgetary):
            total += int(moved and cells[r][c] == spec.entity)
        elif isinstance(spec, Relational):
            d = bfs_distance(cells, (r, c), int(spec.entity))
            total += int(d is not None and d <= spec.distance)
        else:
            total += int(moved and cells[r][c] == spec.forbidden and int(spec.trigger) in before)
    return total


def brute_mask(obs, spec, visited):
    """Mask by enumerating every window cell."""
    n = obs.shape[0]
    out = np.zeros((n, n), dtype=int)
    for i, j in itertools.product(range(n), range(n)):
        if isinstance(spec, Budgetary):
            out[i, j] = int(obs[i, j] == spec.entity)
        elif isinstance(spec, Relational):
            out[i, j] = int(any(
                obs[u, v] == spec.entity and abs(u - i) + abs(v - j) <= spec.distance
                for u, v in itertools.product(range(n), range(n))
            ))
        else:
            out[i, j] = int(spec.trigger in visited and obs[i, j] == spec.forbidden)
    return out


def brute_budget(mask, cumulative, h):
    out = np.zeros(mask.shape)
    for i, j in itertools.product(range(mask.shape[0]), range(mask.shape[1])):
        if mask[i, j] == 1:
            out[i, j] = cumulative - h
    return out


def gae_double_sum(rewards, values, dones, gamma, lam):
    """A_t = sum_l (gamma lam)^l delta_{t+l}, summed inside the episode only."""
    n = len(rewards)
    next_v = np.array([0.0 if dones[t] else values[t + 1] for t in range(n)])
    deltas = np.asarray(rewards, float) + gamma * next_v - np.asarray(values, float)
    adv = np.zeros(n)
    for t in range(n):
        total, w = 0.0, 1.0
        for k in range(t, n):
            total += w * deltas[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = total
    return adv


def discounted_return_loop(rewards, dones, gamma):
    n = len(rewards)
    out = np.zeros(n)
    for t in range(n):
        total, w = 0.0, 1.0
        for k in range(t, n):
            total += w * rewards[k]
            if dones[k]:
                break
            w *= gamma
        out[t] = total
    return out


def discounted_return_backward(rewards, dones, gamma):
    """G_t = r_t + gamma G_{t+1}, restarted at episode ends (same accumulation order as a recursion)."""
    out = np.zeros(len(rewards))
    g = 0.0
    for t in reversed(range(len(rewards))):
        if dones[t]:
            g = 0.0
        g = rewards[t] + gamma * g
        out[t] = g
    return out


# ----------------------------------------------------------------- QP oracles

def trust_region_oracle(g, F, delta):
    """argmax g.d s.t. 0.5 d'Fd <= delta, via the eigenbasis of F (no CG)."""
    w, V = np.linalg.eigh(F)
    half_inv = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    u = half_inv @ g
    u = np.sqrt(2.0 * delta) * u / np.linalg.norm(u)
    return half_inv @ u


def qp_active_set(H, target, A, b):
    """argmin 0.5 (d - target)' H (d - target) s.t. A d + b <= 0, by active-set enumeration.

    Tries every subset of constraints as equalities, solves the KKT system and
    keeps the feasible candidate with non-negative multipliers and the lowest
    objective.
    """
    A = np.atleast_2d(A)
    b = np.atleast_1d(b)
    m, n = A.shape
    best, best_val = None, np.inf
    for k in range(m + 1):
        for active in itertools.combinations(range(m), k):
            idx = list(active)
            if idx:
                Aa = A[idx]
                K = np.block([[H, Aa.T], [Aa, np.zeros((k, k))]])
                rhs = np.concatenate([H @ target, -b[idx]])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    continue
                d, mult = sol[:n], sol[n:]
                if np.any(mult < -1e-12):
                    continue
            else:
                d = target.copy()
            if np.all(A @ d + b <= 1e-10):
                val = 0.5 * (d - target) @ H @ (d - target)
                if val < best_val - 1e-15:
                    best, best_val = d, val
    return best


def random_spd(rng, n, cond=20.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0, np.log(cond), size=n))
    return Q @ np.diag(eig) @ Q.T


def dense_fisher(X, P):
    """Empirical Fisher of a softmax-linear policy with W of shape (A, D), flattened row-major."""
    F = 0.0
    for x, p in zip(X, P):
        F = F + np.kron(np.diag(p) - np.outer(p, p), np.outer(x, x))
    return F / len(X)


# ------------------------------------------------------------- tabular CMDP

def tabular_returns(P, R, C, pi, start, horizon):
    """Exact expected undiscounted (reward, cost) of a stationary policy over a fixed horizon.

    ``P[s, a, s']`` transitions, ``R``/``C`` of shape (S, A), ``pi`` of shape (..., S, A).
    """
    pi = np.asarray(pi, float)
    d = np.zeros(pi.shape[:-1])
    d[..., start] = 1.0
    jr = np.zeros(pi.shape[:-2])
    jc = np.zeros(pi.shape[:-2])
    for _ in range(horizon):
        sa = d[..., :, None] * pi
        jr = jr + np.sum(sa * R, axis=(-2, -1))
        jc = jc + np.sum(sa * C, axis=(-2, -1))
        d = np.einsum("...sa,sat->...t", sa, P)
    return jr, jc

"""Trust-region and projection updates for constrained policy optimisation.

All updates act on a flat parameter vector and only touch the policy through
``SoftmaxPolicy.score_weighted_grad`` and ``fisher_vector_product``. The math
follows the closed forms of the quadratic/linear subproblems:

* reward step:  ``dtheta = sqrt(2 delta / g^T F^-1 g) F^-1 g``
* projection:   ``dtheta - max(0, (a^T dtheta + b) / (a^T L^-1 a)) L^-1 a``
  with ``L = I`` (2-norm) or ``L = F`` (KL).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .params import ParamVector
from .policy import SoftmaxPolicy

log = logging.getLogger(__name__)

Fvp = Callable[[np.ndarray], np.ndarray]


class OptimizationError(ArithmeticError):
    pass


class InfeasibleProjectionError(OptimizationError):
    """Constraint violated (b > 0) while its gradient vanishes."""


class EmptyBatchError(ValueError):
    pass


GROUPINGS = ("pooled", "worst")


@dataclass(frozen=True)
class TrustRegionConfig:
    delta: float = 1e-3
    gamma: float = 0.99
    gamma_c: float = 1.0
    lam_r: float = 0.95
    lam_c: float = 0.9
    cg_iters: int = 20
    cg_tol: float = 1e-10
    damping: float = 1e-4
    projection: str = "KL"
    kl_safeguard: bool = True
    constraint_grouping: str = "pooled"

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        for lam in (self.lam_r, self.lam_c):
            if not 0.0 <= lam <= 1.0:
                raise ValueError("GAE lambda must lie in [0, 1]")
        for g in (self.gamma, self.gamma_c):
            if not 0.0 < g <= 1.0:
                raise ValueError("discount must lie in (0, 1]")
        if self.constraint_grouping not in GROUPINGS:
            raise ValueError(f"unknown constraint grouping {self.constraint_grouping!r}")
        if self.projection.upper() not in ("KL", "L2"):
            raise ValueError(f"unknown projection metric {self.projection!r}")


@dataclass
class RolloutBatch:
    """Flat on-policy steps; ``dones[t]`` marks the last step of an episode.

    ``costs`` is the cost stream the optimiser sees (predicted by the
    interpreter during safety training). Environment oracle costs live behind
    ``oracle_costs`` and are counted when read inside an optimiser scope.
    """

    features: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray
    thresholds: np.ndarray
    value_r: Optional[np.ndarray] = None
    value_c: Optional[np.ndarray] = None
    _oracle_costs: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.actions)
        if self.value_r is None:
            self.value_r = np.zeros(n)
        if self.value_c is None:
            self.value_c = np.zeros(n)
        if n and not self.dones[-1]:
            raise ValueError("batch must end on an episode boundary")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def oracle_costs(self) -> Optional[np.ndarray]:
        OracleAudit.record_read()
        return self._oracle_costs

    def episode_index(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dones[:-1])]).astype(int)

    @property
    def n_episodes(self) -> int:
        return int(np.sum(self.dones))

    def episode_sums(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.episode_index(), weights=values, minlength=self.n_episodes)

    def episode_thresholds(self) -> np.ndarray:
        return self.thresholds[np.asarray(self.dones, dtype=bool)]


class OracleAudit:
    """Counts oracle-cost reads that happen while an optimiser scope is open."""

    depth = 0
    reads_in_optimizer = 0

    @classmethod
    def record_read(cls):
        if cls.depth:
            cls.reads_in_optimizer += 1

    @classmethod
    def reset(cls):
        cls.reads_in_optimizer = 0

    def __enter__(self):
        OracleAudit.depth += 1
        return self

    def __exit__(self, *exc):
        OracleAudit.depth -= 1
        return False


@dataclass(frozen=True)
class LinearizedConstraint:
    a: np.ndarray
    b: float


# ---------------------------------------------------------------- estimators

def gae(rewards, values, dones, gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates; the value after a terminal step is 0."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            next_value, running = 0.0, 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def discounted_returns(rewards, dones, gamma: float) -> np.ndarray:
    return gae(rewards, np.zeros(len(rewards)), dones, gamma, 1.0)


def advantages(batch: RolloutBatch, cfg: TrustRegionConfig) -> Tuple[np.ndarray, np.ndarray]:
    adv_r = gae(batch.rewards, batch.value_r, batch.dones, cfg.gamma, cfg.lam_r)
    adv_c = gae(batch.costs, batch.value_c, batch.dones, cfg.gamma_c, cfg.lam_c)
    return adv_r, adv_c


def surrogate_grads(
    policy: SoftmaxPolicy,
    theta: ParamVector,
    batch: RolloutBatch,
    adv_r: np.ndarray,
    adv_c: np.ndarray,
    h_C: Optional[float] = None,
    grouping: str = "pooled",
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Reward gradient ``g``, cost gradient ``a`` and slack ``b = J_C - h_C``.

    ``g`` is the per-step mean. ``a`` is the gradient of the *episodic* cost,
    i.e. the step sum divided by the number of episodes, so ``a`` and ``b`` share
    units. Without ``h_C`` the per-episode thresholds of the batch are used:
    ``grouping="pooled"`` averages over all episodes, ``grouping="worst"`` treats
    each (rounded) threshold as its own constraint and returns the one with the
    largest ``b``.
    """
    n = len(batch)
    if n == 0:
        raise EmptyBatchError("surrogate_grads on an empty batch")
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown constraint grouping {grouping!r}")
    g = policy.score_weighted_grad(theta, batch.features, batch.actions, adv_r) / n
    ep_costs = batch.episode_sums(batch.costs)
    thresholds = batch.episode_thresholds() if h_C is None else np.full(len(ep_costs), float(h_C))
    if grouping == "pooled" or h_C is not None:
        a = policy.score_weighted_grad(theta, batch.features, batch.actions, adv_c) / batch.n_episodes
        return g, a, float(np.mean(ep_costs - thresholds))
    keys = np.rint(thresholds)
    slack = {k: float(np.mean(ep_costs[keys == k] - thresholds[keys == k])) for k in np.unique(keys)}
    worst = max(slack, key=lambda k: (slack[k], -k))
    in_group = (keys == worst)[batch.episode_index()]
    a = policy.score_weighted_grad(theta, batch.features, batch.actions, adv_c * in_group) / int(np.sum(keys == worst))
    return g, a, slack[worst]


def fisher_vector_product(policy: SoftmaxPolicy, batch: RolloutBatch, theta: ParamVector, v, damping: float = 1e-4):
    return policy.fisher_vector_product(theta, batch.features, v, damping)


def conjugate_gradient(apply_A: Fvp, rhs: np.ndarray, iters: int = 20, tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = rhs`` for symmetric PSD ``A`` given as a matrix-vector product."""
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = r @ r
    stop = (tol * np.linalg.norm(rhs)) ** 2
    for _ in range(iters):
        if rr <= stop:
            break
        Ap = apply_A(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise OptimizationError("conjugate gradient produced a non-finite iterate")
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def trpo_step(g: np.ndarray, fvp: Fvp, delta: float, cg_iters: int = 20, cg_tol: float = 1e-10) -> np.ndarray:
    """Maximiser of ``g^T d`` subject to ``0.5 d^T F d <= delta``.

    The step length is set from ``x^T F x`` of the CG solution ``x`` (equal to
    ``g^T F^-1 g`` at convergence), which keeps the quadratic KL budget exact
    even when CG stops early.
    """
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        return np.zeros_like(g)
    x = conjugate_gradient(fvp, g, cg_iters, cg_tol)
    gx = g @ x
    xFx = x @ fvp(x)
    if not (gx > 0 and xFx > 0):
        raise OptimizationError(f"Fisher solve not positive (g.x={gx:.3e}, x.Fx={xFx:.3e})")
    return np.sqrt(2.0 * delta / xFx) * x


def metric_inverse(metric: str, fvp: Optional[Fvp], v: np.ndarray, cg_iters: int = 20, cg_tol: float = 1e-10):
    if metric.upper() == "L2":
        return np.asarray(v, dtype=float)
    if fvp is None:
        raise ValueError("KL projection needs a Fisher-vector product")
    return conjugate_gradient(fvp, v, cg_iters, cg_tol)


def project(
    step: np.ndarray,
    constraint: LinearizedConstraint,
    metric: str = "KL",
    fvp: Optional[Fvp] = None,
    cg_iters: int = 20,
    cg_tol: float = 1e-10,
    Linv_a: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Closest point (in metric L) to ``step`` on ``{d : a^T d + b <= 0}``."""
    a, b = np.asarray(constraint.a, dtype=float), float(constraint.b)
    step = np.asarray(step, dtype=float)
    violation = a @ step + b
    if violation <= 0:
        return step.copy()
    if not np.any(a):
        raise InfeasibleProjectionError(f"constraint violated by {b:.4g} with zero gradient")
    if Linv_a is None:
        Linv_a = metric_inverse(metric, fvp, a, cg_iters, cg_tol)
    return step - (violation / (a @ Linv_a)) * Linv_a


# --------------------------------------------------------------------- updates

def _fvp_for(policy, theta, batch, cfg) -> Fvp:
    return policy.fisher_operator(theta, batch.features, cfg.damping)


def _safeguard(policy, theta, batch, step, cfg) -> Tuple[np.ndarray, float]:
    kl = policy.kl(theta, theta.like(theta.values + step), batch.features)
    if not cfg.kl_safeguard:
        return step, kl
    for _ in range(20):
        if kl <= 2 * cfg.delta:
            break
        step = 0.5 * step
        kl = policy.kl(theta, theta.like(theta.values + step), batch.features)
    return step, kl


def _batch_stats(batch: RolloutBatch, h_C) -> Dict[str, float]:
    J_R = float(np.mean(batch.episode_sums(batch.rewards)))
    ep_c = batch.episode_sums(batch.costs)
    J_C = float(np.mean(ep_c))
    h = float(np.mean(batch.episode_thresholds())) if h_C is None else float(h_C)
    return {"J_R": J_R, "J_C": J_C, "delta_C": max(0.0, J_C - h)}


def _finish(policy, theta, batch, step, cfg, info, t0):
    step, kl = _safeguard(policy, theta, batch, step, cfg)
    new = theta.like(theta.values + step)
    if not new.is_finite():
        raise OptimizationError("update produced non-finite parameters")
    info["kl"] = kl
    info["wall_time"] = time.perf_counter() - t0
    return new, info


def trpo_update(policy: SoftmaxPolicy, theta: ParamVector, batch: RolloutBatch, cfg: TrustRegionConfig,
                adv_r: Optional[np.ndarray] = None):
    """Reward-only trust-region step (the constraint-ignoring baseline)."""
    t0 = time.perf_counter()
    if adv_r is None:
        adv_r = gae(batch.rewards, batch.value_r, batch.dones, cfg.gamma, cfg.lam_r)
    g = policy.score_weighted_grad(theta, batch.features, batch.actions, adv_r) / len(batch)
    fvp = _fvp_for(policy, theta, batch, cfg)
    step = trpo_step(g, fvp, cfg.delta, cfg.cg_iters, cfg.cg_tol)
    info = _batch_stats(batch, None)
    info.update(projection_active=False, recovery=False)
    return _finish(policy, theta, batch, step, cfg, info, t0)


def penalized_trpo_update(policy, theta, batch: RolloutBatch, penalty_weight: float, cfg: TrustRegionConfig):
    """Trust-region step on ``reward - penalty_weight * cost``."""
    w = float(penalty_weight)
    adv = gae(batch.rewards - w * batch.costs, batch.value_r - w * batch.value_c, batch.dones, cfg.gamma, cfg.lam_r)
    return trpo_update(policy, theta, batch, cfg, adv_r=adv)


def pcpo_update(policy: SoftmaxPolicy, theta: ParamVector, batch: RolloutBatch, h_C: Optional[float],
                cfg: TrustRegionConfig):
    """Reward step followed by projection onto the linearised cost constraint."""
    t0 = time.perf_counter()
    adv_r, adv_c = advantages(batch, cfg)
    g, a, b = surrogate_grads(policy, theta, batch, adv_r, adv_c, h_C, cfg.constraint_grouping)
    fvp = _fvp_for(policy, theta, batch, cfg)
    reward_step = trpo_step(g, fvp, cfg.delta, cfg.cg_iters, cfg.cg_tol)
    info = _batch_stats(batch, h_C)
    info.update(b=b, recovery=False)
    try:
        step = project(reward_step, LinearizedConstraint(a, b), cfg.projection, fvp, cfg.cg_iters, cfg.cg_tol)
    except InfeasibleProjectionError:
        log.warning("cost gradient vanished with slack %.4g; taking a cost-descent recovery step", b)
        step = trpo_step(-a, fvp, cfg.delta, cfg.cg_iters, cfg.cg_tol) if np.any(a) else np.zeros_like(a)
        info["recovery"] = True
    info["projection_active"] = bool(a @ reward_step + b > 0)
    return _finish(policy, theta, batch, step, cfg, info, t0)


def space_update(
    policy: SoftmaxPolicy,
    theta: ParamVector,
    batch: RolloutBatch,
    theta_baseline: ParamVector,
    h_C: Optional[float],
    h_D: float,
    cfg: TrustRegionConfig,
    sequential: bool = True,
):
    """Reward step, projection onto the KL region around a baseline policy, then the cost projection.

    With ``sequential=True`` the cost projection is applied to the output of the
    baseline projection. With ``sequential=False`` both corrections are computed
    from the reward-step point and summed.
    """
    if h_D <= 0:
        raise ValueError("h_D must be positive")
    t0 = time.perf_counter()
    adv_r, adv_c = advantages(batch, cfg)
    g, c_vec, d = surrogate_grads(policy, theta, batch, adv_r, adv_c, h_C, cfg.constraint_grouping)
    kl_b, a_vec = policy.kl_grad(theta, theta_baseline, batch.features)
    b = kl_b - h_D
    fvp = _fvp_for(policy, theta, batch, cfg)
    reward_step = trpo_step(g, fvp, cfg.delta, cfg.cg_iters, cfg.cg_tol)
    div = LinearizedConstraint(a_vec, b)
    cost = LinearizedConstraint(c_vec, d)
    mid = project(reward_step, div, cfg.projection, fvp, cfg.cg_iters, cfg.cg_tol)
    if sequential:
        step = project(mid, cost, cfg.projection, fvp, cfg.cg_iters, cfg.cg_tol)
    else:
        step = mid + project(reward_step, cost, cfg.projection, fvp, cfg.cg_iters, cfg.cg_tol) - reward_step
    info = _batch_stats(batch, h_C)
    info.update(b=d, kl_to_baseline=kl_b, h_D=h_D, recovery=False,
                projection_active=bool(a_vec @ reward_step + b > 0 or c_vec @ reward_step + d > 0))
    return _finish(policy, theta, batch, step, cfg, info, t0)


def update_h_D(J_C: float, h_C: float, h_D_k: float, regressed: bool, constant: float = 10.0) -> float:
    if h_D_k <= 0:
        raise ValueError("h_D must be positive")
    if not regressed:
        return h_D_k
    return constant * (J_C - h_C) ** 2 + h_D_k


def has_regressed(J_C_history, J_R_history, window: int = 3) -> bool:
    """Cost rose or reward fell between the last two windows of smoothed estimates."""
    if len(J_C_history) < 2 * window or len(J_R_history) < 2 * window:
        return False
    cur_c, prev_c = np.mean(J_C_history[-window:]), np.mean(J_C_history[-2 * window : -window])
    cur_r, prev_r = np.mean(J_R_history[-window:]), np.mean(J_R_history[-2 * window : -window])
    return bool(cur_c > prev_c or cur_r < prev_r)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safegrid.policy import SoftmaxPolicy
from safegrid.safeopt import (
    EmptyBatchError,
    InfeasibleProjectionError,
    LinearizedConstraint,
    OptimizationError,
    OracleAudit,
    RolloutBatch,
    TrustRegionConfig,
    advantages,
    conjugate_gradient,
    discounted_returns,
    gae,
    has_regressed,
    pcpo_update,
    penalized_trpo_update,
    project,
    space_update,
    surrogate_grads,
    trpo_step,
    trpo_update,
    update_h_D,
)

from oracles import dense_fisher, discounted_return_loop, gae_double_sum, qp_active_set, random_spd, trust_region_oracle

seeds = st.integers(0, 2**32 - 1)
EXACT = TrustRegionConfig(delta=1e-2, kl_safeguard=False, damping=1e-4, cg_iters=50, cg_tol=1e-14)


def _dones(rng, n, p=0.2):
    d = rng.random(n) < p
    d[-1] = True
    return d


def _batch(rng, n=40, d=2, thresholds=None, costs=None):
    X = rng.normal(size=(n, d))
    pol = SoftmaxPolicy(d)
    theta = pol.init_params()
    theta.values[:] = 0.3 * rng.normal(size=len(theta))
    acts = rng.integers(4, size=n)
    dones = _dones(rng, n)
    batch = RolloutBatch(
        features=X,
        actions=acts,
        log_probs=pol.log_probs(theta, X, acts),
        rewards=rng.normal(size=n),
        costs=rng.integers(0, 2, size=n).astype(float) if costs is None else costs,
        dones=dones,
        thresholds=np.zeros(n) if thresholds is None else thresholds,
        value_r=rng.normal(size=n),
        value_c=rng.normal(size=n),
    )
    return pol, theta, batch


# -------------------------------------------------------------------------- GAE

def test_gae_single_step():
    for g, lam in [(0.99, 0.95), (0.5, 0.0), (1.0, 1.0)]:
        assert gae([1.0], [0.0], [True], g, lam)[0] == 1.0


@given(seed=seeds, gamma=st.floats(0.5, 1.0), lam=st.floats(0.0, 1.0))
def test_gae_matches_double_sum(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    n = 10
    r, v, d = rng.normal(size=n), rng.normal(size=n), _dones(rng, n, 0.3)
    assert np.max(np.abs(gae(r, v, d, gamma, lam) - gae_double_sum(r, v, d, gamma, lam))) <= 1e-12


@given(seed=seeds, gamma=st.floats(0.5, 1.0))
def test_gae_lambda_one_is_discounted_return(seed, gamma):
    rng = np.random.default_rng(seed)
    r, d = rng.normal(size=12), _dones(rng, 12, 0.3)
    assert np.array_equal(gae(r, np.zeros(12), d, gamma, 1.0), discounted_returns(r, d, gamma))
    assert np.allclose(discounted_returns(r, d, gamma), discounted_return_loop(r, d, gamma), atol=1e-12)


def test_advantage_streams_use_their_own_parameters():
    rng = np.random.default_rng(0)
    _, _, b = _batch(rng)
    cfg = TrustRegionConfig(gamma=0.9, lam_r=0.8, gamma_c=1.0, lam_c=0.5)
    ar, ac = advantages(b, cfg)
    assert np.allclose(ar, gae(b.rewards, b.value_r, b.dones, 0.9, 0.8))
    assert np.allclose(ac, gae(b.costs, b.value_c, b.dones, 1.0, 0.5))


def test_config_validation():
    for bad in (dict(delta=0), dict(lam_r=1.5), dict(gamma=0.0), dict(projection="L1"), dict(constraint_grouping="x")):
        with pytest.raises(ValueError):
            TrustRegionConfig(**bad)


def test_batch_must_end_on_boundary():
    with pytest.raises(ValueError):
        RolloutBatch(np.zeros((2, 1)), np.zeros(2, int), np.zeros(2), np.zeros(2), np.zeros(2),
                     np.array([True, False]), np.zeros(2))


# -------------------------------------------------------------- surrogate grads

def test_surrogate_zero_advantages():
    rng = np.random.default_rng(1)
    pol, theta, b = _batch(rng)
    g, a, _ = surrogate_grads(pol, theta, b, np.zeros(len(b)), np.zeros(len(b)), 0.0)
    assert not np.any(g) and not np.any(a)


def test_surrogate_slack_at_boundary():
    rng = np.random.default_rng(2)
    pol, theta, b = _batch(rng)
    J_C = float(np.mean(b.episode_sums(b.costs)))
    _, _, slack = surrogate_grads(pol, theta, b, *advantages(b, TrustRegionConfig()), h_C=J_C)
    assert slack == pytest.approx(0.0, abs=1e-12)


def test_surrogate_empty_batch():
    pol = SoftmaxPolicy(2)
    empty = RolloutBatch(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros(0),
                         np.zeros(0, bool), np.zeros(0))
    with pytest.raises(EmptyBatchError):
        surrogate_grads(pol, pol.init_params(), empty, np.zeros(0), np.zeros(0), 0.0)


def test_surrogate_on_bandit_matches_closed_form():
    rng = np.random.default_rng(3)
    pol = SoftmaxPolicy(2)
    theta = pol.init_params()
    theta.values[:] = rng.normal(size=8)
    R = np.array([[1.0, 0.0, -1.0, 2.0], [0.5, 3.0, 0.0, -2.0]])
    n = 20000
    states = rng.integers(2, size=n)
    X = np.eye(2)[states]
    P = pol.probs(theta, X)
    acts = (np.cumsum(P, axis=1) < rng.random(n)[:, None]).sum(axis=1)
    rewards = R[states, acts]
    b = RolloutBatch(X, acts, np.log(P[np.arange(n), acts]), rewards, np.zeros(n), np.ones(n, bool), np.zeros(n))
    g, _, _ = surrogate_grads(pol, theta, b, rewards, np.zeros(n), 0.0)
    exact = np.zeros(8)
    for s in range(2):
        x = np.eye(2)[s]
        p = pol.probs(theta, x[None])[0]
        for act in range(4):
            exact += 0.5 * p[act] * R[s, act] * pol.log_prob_grad(theta, x[None], act)
    per = np.stack([rewards[i] * pol.log_prob_grad(theta, X[i : i + 1], acts[i]) for i in range(2000)])
    sigma = per.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(g - exact) <= 3 * sigma + 1e-12)


def test_cost_gradient_is_per_episode():
    rng = np.random.default_rng(4)
    pol, theta, b = _batch(rng)
    ar, ac = advantages(b, TrustRegionConfig())
    _, a, slack = surrogate_grads(pol, theta, b, ar, ac, 1.0)
    assert np.allclose(a, pol.score_weighted_grad(theta, b.features, b.actions, ac) / b.n_episodes)
    assert slack == pytest.approx(np.mean(b.episode_sums(b.costs)) - 1.0)


def test_worst_group_constraint():
    # two episodes at threshold 0 with cost 1 each, one at threshold 4 with cost 3
    pol = SoftmaxPolicy(2)
    theta = pol.init_params()
    X = np.random.default_rng(5).normal(size=(6, 2))
    dones = np.array([False, True, False, True, False, True])
    costs = np.array([1.0, 0.0, 0.0, 1.0, 2.0, 1.0])
    thr = np.array([0, 0, 0, 0, 4, 4], dtype=float)
    b = RolloutBatch(X, np.zeros(6, int), np.full(6, np.log(0.25)), np.zeros(6), costs, dones, thr)
    ac = np.arange(6, dtype=float)
    _, a_pool, b_pool = surrogate_grads(pol, theta, b, np.zeros(6), ac, None, "pooled")
    assert b_pool == pytest.approx(np.mean([1 - 0, 1 - 0, 3 - 4]))
    _, a_worst, b_worst = surrogate_grads(pol, theta, b, np.zeros(6), ac, None, "worst")
    assert b_worst == pytest.approx(1.0)
    want = pol.score_weighted_grad(theta, X, b.actions, ac * np.array([1, 1, 1, 1, 0, 0])) / 2
    assert np.allclose(a_worst, want)


# ------------------------------------------------------------- CG and steps

def test_cg_identity_single_iteration():
    ident = lambda v: v
    rhs = np.array([1.0, -2.0, 3.0])
    assert np.allclose(conjugate_gradient(ident, rhs, iters=1), rhs)
    assert not np.any(conjugate_gradient(ident, np.zeros(3)))


@given(seed=seeds)
def test_cg_matches_direct_solve(seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 8)
    rhs = rng.normal(size=8)
    x = conjugate_gradient(lambda v: A @ v, rhs, iters=50, tol=1e-14)
    assert np.allclose(x, np.linalg.solve(A, rhs), atol=1e-8)


def test_cg_non_finite():
    with pytest.raises(OptimizationError), np.errstate(invalid="ignore"):
        conjugate_gradient(lambda v: v * np.inf, np.array([1.0, 1.0]))


def test_trpo_step_examples():
    assert np.allclose(trpo_step(np.array([1.0, 0.0]), lambda v: v, 0.5), [1.0, 0.0])
    assert not np.any(trpo_step(np.zeros(3), lambda v: v, 0.5))
    with pytest.raises(OptimizationError):
        trpo_step(np.array([1.0, 0.0]), lambda v: -v, 0.5)


@given(seed=seeds, delta=st.floats(1e-4, 1.0))
def test_trpo_step_spends_the_kl_budget(seed, delta):
    rng = np.random.default_rng(seed)
    F = random_spd(rng, 8)
    g = rng.normal(size=8)
    step = trpo_step(g, lambda v: F @ v, delta, cg_iters=50, cg_tol=1e-14)
    assert 0.5 * step @ F @ step == pytest.approx(delta, rel=1e-8)
    assert np.allclose(step, trust_region_oracle(g, F, delta), atol=1e-6)


# ------------------------------------------------------------------- projection

def test_project_examples():
    c = LinearizedConstraint(np.array([0.0, 1.0]), 0.5)
    assert np.allclose(project(np.array([1.0, 0.0]), c, "L2"), [1.0, -0.5])
    inactive = LinearizedConstraint(np.array([0.0, 1.0]), -1.0)
    assert np.array_equal(project(np.array([1.0, 0.0]), inactive, "L2"), [1.0, 0.0])
    F = 2 * np.eye(2)
    out = project(np.array([1.0, 0.0]), c, "KL", lambda v: F @ v)
    assert np.allclose(out, qp_active_set(F, np.array([1.0, 0.0]), c.a[None], [c.b]))
    assert np.allclose(out, [1.0, -0.5])


def test_project_infeasible():
    with pytest.raises(InfeasibleProjectionError):
        project(np.ones(2), LinearizedConstraint(np.zeros(2), 0.3), "L2")
    # a zero gradient is fine while the constraint holds
    assert np.array_equal(project(np.ones(2), LinearizedConstraint(np.zeros(2), -0.3), "L2"), np.ones(2))


@given(seed=seeds, metric=st.sampled_from(["KL", "L2"]))
def test_projection_kkt_and_idempotence(seed, metric):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    F = random_spd(rng, n)
    L = F if metric == "KL" else np.eye(n)
    fvp = lambda v: F @ v
    step, a = rng.normal(size=n), rng.normal(size=n)
    b = abs(a @ step) + rng.uniform(0.1, 1.0)  # active
    con = LinearizedConstraint(a, b)
    out = project(step, con, metric, fvp, cg_iters=50, cg_tol=1e-14)
    assert abs(a @ out + b) <= 1e-8
    diff, dirn = step - out, np.linalg.solve(L, a)
    cos = diff @ dirn / (np.linalg.norm(diff) * np.linalg.norm(dirn))
    assert np.arccos(min(1.0, cos)) <= 1e-6
    again = project(out, con, metric, fvp, cg_iters=50, cg_tol=1e-14)
    assert np.allclose(again, out, atol=1e-12)


@given(seed=seeds, metric=st.sampled_from(["KL", "L2"]))
def test_pcpo_step_matches_qp_oracle(seed, metric):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    F = random_spd(rng, n)
    g, a = rng.normal(size=n), rng.normal(size=n)
    delta = rng.uniform(1e-3, 0.5)
    b = rng.normal()
    fvp = lambda v: F @ v
    step = project(trpo_step(g, fvp, delta, 50, 1e-14), LinearizedConstraint(a, b), metric, fvp, 50, 1e-14)
    L = F if metric == "KL" else np.eye(n)
    want = qp_active_set(L, trust_region_oracle(g, F, delta), a[None], [b])
    assert np.max(np.abs(step - want)) <= 1e-6


# ---------------------------------------------------------------------- updates

def test_pcpo_inactive_projection_is_trpo():
    rng = np.random.default_rng(6)
    pol, theta, b = _batch(rng)
    t1, info = pcpo_update(pol, theta, b, h_C=1e6, cfg=EXACT)
    t2, _ = trpo_update(pol, theta, b, EXACT)
    assert not info["projection_active"]
    assert np.allclose(t1.values, t2.values, atol=1e-14)


def test_pcpo_zero_reward_gradient_restores_feasibility():
    rng = np.random.default_rng(7)
    pol, theta, b = _batch(rng)
    b.rewards[:] = 0
    b.value_r[:] = 0
    cfg = TrustRegionConfig(kl_safeguard=False, cg_iters=50, cg_tol=1e-14)
    new, info = pcpo_update(pol, theta, b, h_C=0.0, cfg=cfg)
    _, ac = advantages(b, cfg)
    _, a, slack = surrogate_grads(pol, theta, b, np.zeros(len(b)), ac, 0.0)
    assert slack > 0 and info["projection_active"]
    F = dense_fisher(b.features, pol.probs(theta, b.features)) + cfg.damping * np.eye(len(theta))
    want = -(slack / (a @ np.linalg.solve(F, a))) * np.linalg.solve(F, a)
    assert np.allclose(new.values - theta.values, want, atol=1e-9)


def test_pcpo_recovery_when_cost_gradient_vanishes():
    rng = np.random.default_rng(8)
    pol, theta, b = _batch(rng)
    b.value_c[:] = 0
    b.costs[:] = 0
    # slack positive with no cost signal: cost gradient is zero, projection impossible
    t, info = pcpo_update(pol, theta, b, h_C=-1.0, cfg=EXACT)
    assert info["recovery"]
    assert np.allclose(t.values, theta.values)


def test_penalized_trpo_reductions():
    rng = np.random.default_rng(9)
    pol, theta, b = _batch(rng)
    plain, _ = trpo_update(pol, theta, b, EXACT)
    zero_w, _ = penalized_trpo_update(pol, theta, b, 0.0, EXACT)
    assert np.allclose(plain.values, zero_w.values, atol=1e-14)
    b.costs[:] = 0
    b.value_c[:] = 0
    heavy, _ = penalized_trpo_update(pol, theta, b, 50.0, EXACT)
    assert np.allclose(plain.values, heavy.values, atol=1e-14)


def test_space_reductions():
    rng = np.random.default_rng(10)
    pol, theta, b = _batch(rng)
    p, _ = pcpo_update(pol, theta, b, 0.0, EXACT)
    s, _ = space_update(pol, theta, b, theta.copy(), 0.0, 1e6, EXACT)
    assert np.allclose(p.values, s.values, atol=1e-12)
    t, _ = trpo_update(pol, theta, b, EXACT)
    s2, info = space_update(pol, theta, b, theta.copy(), 1e6, 1e6, EXACT)
    assert np.allclose(t.values, s2.values, atol=1e-12) and not info["projection_active"]
    with pytest.raises(ValueError):
        space_update(pol, theta, b, theta, 0.0, 0.0, EXACT)


@given(seed=seeds)
def test_space_matches_sequential_projection_oracle(seed):
    rng = np.random.default_rng(seed)
    pol, theta, b = _batch(rng, n=30)
    base = theta.like(theta.values + 0.5 * rng.normal(size=len(theta)))
    h_C, h_D = float(rng.uniform(0, 1)), float(rng.uniform(0.01, 0.2))
    new, _ = space_update(pol, theta, b, base, h_C, h_D, EXACT)
    ar, ac = advantages(b, EXACT)
    g, c, d = surrogate_grads(pol, theta, b, ar, ac, h_C)
    kl, a = pol.kl_grad(theta, base, b.features)
    F = dense_fisher(b.features, pol.probs(theta, b.features)) + EXACT.damping * np.eye(len(theta))
    mid = qp_active_set(F, trust_region_oracle(g, F, EXACT.delta), a[None], [kl - h_D])
    want = qp_active_set(F, mid, c[None], [d])
    assert np.max(np.abs(new.values - theta.values - want)) <= 1e-6


def test_updates_do_not_read_oracle_costs():
    rng = np.random.default_rng(11)
    pol, theta, b = _batch(rng)
    b._oracle_costs = np.ones(len(b))
    OracleAudit.reset()
    with OracleAudit():
        pcpo_update(pol, theta, b, 0.0, EXACT)
        space_update(pol, theta, b, theta, 0.0, 0.1, EXACT)
        trpo_update(pol, theta, b, EXACT)
    assert OracleAudit.reads_in_optimizer == 0
    with OracleAudit():
        b.oracle_costs
    assert OracleAudit.reads_in_optimizer == 1
    OracleAudit.reset()


def test_kl_safeguard_halves_large_steps():
    rng = np.random.default_rng(12)
    pol, theta, b = _batch(rng)
    big = TrustRegionConfig(delta=5.0, kl_safeguard=True)
    _, info = trpo_update(pol, theta, b, big)
    assert info["kl"] <= 2 * big.delta


# ----------------------------------------------------------------------- h_D

def test_update_h_D_examples():
    assert update_h_D(3.0, 3.0, 2.0, True) == 2.0
    assert update_h_D(4.0, 3.0, 5.0, True) == 15.0
    assert update_h_D(9.0, 3.0, 5.0, False) == 5.0
    with pytest.raises(ValueError):
        update_h_D(1.0, 0.0, 0.0, True)


@given(jc=st.floats(0, 50), hc=st.floats(0, 5), hd=st.floats(1e-6, 100), reg=st.booleans())
def test_update_h_D_never_decreases(jc, hc, hd, reg):
    assert update_h_D(jc, hc, hd, reg) >= hd


def test_regression_uses_smoothed_windows():
    assert not has_regressed([1, 2], [1, 2])
    assert has_regressed([1, 1, 1, 2, 2, 2], [5, 5, 5, 5, 5, 5])
    assert has_regressed([1, 1, 1, 1, 1, 1], [5, 5, 5, 4, 4, 4])
    assert not has_regressed([2, 2, 2, 1, 1, 1], [4, 4, 4, 5, 5, 5])

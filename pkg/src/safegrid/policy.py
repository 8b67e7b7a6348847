"""Constraint-conditioned categorical policies, value baselines and the fusion baseline.

Policies act on flat feature vectors. ``encode_inputs`` builds the features of
the constraint-conditioned agent (observation one-hots, constraint mask, budget
mask, threshold one-hot); ``encode_fusion`` builds the constraint-fusion
baseline's features (observation one-hots plus a text vector). Both end in a
constant 1 so the linear family carries its own bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import N_ACTIONS, N_KINDS, VIEW_SIZE
from .params import ParamVector

N_CELLS = VIEW_SIZE * VIEW_SIZE
N_THRESHOLDS = 6
BUDGET_CLIP = 5.0


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PolicyInput:
    obs: np.ndarray
    mask: np.ndarray
    budget: np.ndarray
    threshold: float


@dataclass(frozen=True)
class FeatureConfig:
    use_mask: bool = True
    use_budget: bool = True
    use_threshold: bool = True

    @property
    def n_features(self) -> int:
        return N_CELLS * N_KINDS + 2 * N_CELLS + N_THRESHOLDS + 1


def threshold_onehot(h_hat) -> np.ndarray:
    """One-hot of floor(h_hat) clamped into 0..5; works on scalars and arrays."""
    h = np.clip(np.floor(np.asarray(h_hat, dtype=float)), 0, N_THRESHOLDS - 1).astype(int)
    return np.eye(N_THRESHOLDS)[h]


def obs_onehot(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs)
    n = obs.shape[0]
    return np.eye(N_KINDS)[obs.reshape(n, -1).astype(np.int64)].reshape(n, -1)


def encode_inputs(obs, mask, budget, threshold, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Batched feature encoding; ``obs``/``mask``/``budget`` are (N, 7, 7), ``threshold`` is (N,)."""
    obs = np.asarray(obs)
    n = obs.shape[0]
    parts = [obs_onehot(obs)]
    m = np.asarray(mask, dtype=float).reshape(n, -1)
    parts.append(m if config.use_mask else np.zeros_like(m))
    b = np.clip(np.asarray(budget, dtype=float).reshape(n, -1), -BUDGET_CLIP, BUDGET_CLIP) / BUDGET_CLIP
    parts.append(b if config.use_budget else np.zeros_like(b))
    t = threshold_onehot(np.asarray(threshold, dtype=float).reshape(n))
    parts.append(t if config.use_threshold else np.zeros_like(t))
    parts.append(np.ones((n, 1)))
    return np.concatenate(parts, axis=1)


def encode_input(inp: PolicyInput, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return encode_inputs(inp.obs[None], inp.mask[None], inp.budget[None], [inp.threshold], config)[0]


def encode_fusion(obs, text_encoding) -> np.ndarray:
    obs = np.asarray(obs)
    n = obs.shape[0]
    text = np.broadcast_to(np.asarray(text_encoding, dtype=float), (n, np.shape(text_encoding)[-1]))
    return np.concatenate([obs_onehot(obs), text, np.ones((n, 1))], axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class SoftmaxPolicy:
    """Categorical policy over 4 actions from features ``X`` of shape (N, D).

    With ``hidden=0`` the logits are ``X @ W.T``; otherwise one tanh layer of
    width ``hidden`` sits in between. Gradients are exact: ``jvp`` and ``vjp``
    give the logit Jacobian products everything else is built from.
    """

    def __init__(self, n_features: int, hidden: int = 0, n_actions: int = N_ACTIONS):
        self.n_features = n_features
        self.hidden = hidden
        self.n_actions = n_actions

    def init_params(self, rng: Optional[np.random.Generator] = None) -> ParamVector:
        if not self.hidden:
            return ParamVector.zeros({"W": (self.n_actions, self.n_features)})
        pv = ParamVector.zeros(
            {
                "W1": (self.hidden, self.n_features),
                "b1": (self.hidden,),
                "W2": (self.n_actions, self.hidden),
            }
        )
        if rng is not None:
            pv["W1"] = rng.normal(scale=1.0 / np.sqrt(self.n_features), size=(self.hidden, self.n_features))
        return pv

    def _hidden(self, theta: ParamVector, X):
        return np.tanh(X @ theta["W1"].T + theta["b1"])

    def logits(self, theta: ParamVector, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if not self.hidden:
            z = X @ theta["W"].T
        else:
            z = self._hidden(theta, X) @ theta["W2"].T
        if not np.all(np.isfinite(z)):
            raise NonFiniteError("policy produced non-finite logits")
        return z

    def probs(self, theta: ParamVector, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(theta, X))

    def log_probs(self, theta: ParamVector, X: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = self.logits(theta, X)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return z[np.arange(len(z)), actions] - lse

    def jvp(self, theta: ParamVector, X: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Directional derivative of the logits along parameter direction ``v``: (N, A)."""
        dv = theta.like(v)
        X = np.atleast_2d(X)
        if not self.hidden:
            return X @ dv["W"].T
        h = self._hidden(theta, X)
        dh = (1 - h**2) * (X @ dv["W1"].T + dv["b1"])
        return h @ dv["W2"].T + dh @ theta["W2"].T

    def vjp(self, theta: ParamVector, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """``sum_i J_i^T U_i`` where ``J_i`` is the logit Jacobian of sample i."""
        X = np.atleast_2d(X)
        out = theta.like(np.zeros(len(theta)))
        if not self.hidden:
            out["W"] = U.T @ X
            return out.values
        h = self._hidden(theta, X)
        out["W2"] = U.T @ h
        dpre = (U @ theta["W2"]) * (1 - h**2)
        out["W1"] = dpre.T @ X
        out["b1"] = dpre.sum(axis=0)
        return out.values

    def log_prob_grad(self, theta: ParamVector, x: np.ndarray, action: int) -> np.ndarray:
        x = np.atleast_2d(x)
        p = self.probs(theta, x)
        U = -p
        U[0, action] += 1.0
        return self.vjp(theta, x, U)

    def score_weighted_grad(self, theta: ParamVector, X: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """``sum_i w_i * grad log pi(a_i | x_i)``."""
        p = self.probs(theta, X)
        U = -p
        U[np.arange(len(U)), actions] += 1.0
        return self.vjp(theta, X, U * np.asarray(weights)[:, None])

    def fisher_vector_product(self, theta: ParamVector, X: np.ndarray, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
        """``(F + damping I) v`` with F the empirical Fisher averaged over rows of X."""
        return self.fisher_operator(theta, X, damping)(v)

    def fisher_operator(self, theta: ParamVector, X: np.ndarray, damping: float = 0.0):
        """Closure computing ``(F + damping I) v``; action probabilities are computed once."""
        X = np.atleast_2d(X)
        p = self.probs(theta, X)

        def apply(v):
            Jv = self.jvp(theta, X, v)
            U = p * Jv - p * (p * Jv).sum(axis=1, keepdims=True)
            return self.vjp(theta, X, U) / len(X) + damping * np.asarray(v)

        return apply

    def kl(self, theta_old: ParamVector, theta_new: ParamVector, X: np.ndarray) -> float:
        """Mean KL(pi_old || pi_new) over the rows of X."""
        p = self.probs(theta_old, X)
        lp_old = np.log(np.clip(p, 1e-300, None))
        lp_new = np.log(np.clip(self.probs(theta_new, X), 1e-300, None))
        return float(np.mean(np.sum(p * (lp_old - lp_new), axis=1)))

    def kl_grad(self, theta: ParamVector, theta_ref: ParamVector, X: np.ndarray):
        """Value and gradient (w.r.t. ``theta``) of mean KL(pi_theta || pi_ref)."""
        p = self.probs(theta, X)
        lp = np.log(np.clip(p, 1e-300, None))
        lq = np.log(np.clip(self.probs(theta_ref, X), 1e-300, None))
        per = np.sum(p * (lp - lq), axis=1)
        U = p * (lp - lq - per[:, None])
        return float(per.mean()), self.vjp(theta, X, U) / len(X)


def sample_actions(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one uniform per row."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < np.asarray(uniforms)[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class LinearValue:
    """Scalar baseline ``x . w`` fitted by ridge-regularised least squares."""

    def __init__(self, n_features: int, ridge: float = 1e-8):
        self.n_features = n_features
        self.ridge = ridge

    def init_params(self) -> ParamVector:
        return ParamVector.zeros({"w": (self.n_features,)})

    def predict(self, theta: ParamVector, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ theta["w"]

    def fit(self, theta: ParamVector, X: np.ndarray, targets: np.ndarray) -> ParamVector:
        return self.fit_many(theta, X, np.asarray(targets, dtype=float)[:, None])[0]

    def fit_many(self, theta: ParamVector, X: np.ndarray, targets: np.ndarray):
        """One ridge solve shared by several target columns; returns one ParamVector per column."""
        X = np.atleast_2d(X)
        A = X.T @ X + self.ridge * len(X) * np.eye(X.shape[1])
        W = np.linalg.solve(A, X.T @ np.asarray(targets, dtype=float))
        out = []
        for w in W.T:
            pv = theta.copy()
            pv["w"] = w
            out.append(pv)
        return out


def policy_forward(policy: SoftmaxPolicy, theta: ParamVector, inp: PolicyInput, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return policy.probs(theta, encode_input(inp, config)[None])[0]


def fusion_forward(policy: SoftmaxPolicy, theta: ParamVector, obs: np.ndarray, text_encoding: np.ndarray) -> np.ndarray:
    return policy.probs(theta, encode_fusion(np.asarray(obs)[None], text_encoding))[0]


def value_forward(value: LinearValue, theta_v: ParamVector, inp: PolicyInput, config: FeatureConfig = FeatureConfig()) -> float:
    return float(value.predict(theta_v, encode_input(inp, config)[None])[0])


cost_value_forward = value_forward

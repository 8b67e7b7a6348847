"""On-policy rollout collection over the batched grid world.

Three agent kinds share one loop:

* ``polco``: features from the interpreter's masks and threshold; the cost
  stream handed to the optimiser is the interpreter's prediction, i.e. the
  predicted mask value of the cell the agent ends the step on.
* ``fusion``: observation one-hots plus a bag-of-words text vector.
* ``random``: uniform actions, no features.

Episodes run in waves of up to ``n_envs`` parallel environments; steps are
reordered episode-major before being packed into a :class:`RolloutBatch`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constraints import merge_masks, tokenize
from .env import MOVES, N_ACTIONS, GridMap, RewardTable
from .interpreter import ConstraintCase
from .params import ParamVector
from .policy import FeatureConfig, LinearValue, SoftmaxPolicy, encode_fusion, encode_inputs
from .safeopt import RolloutBatch
from .vecenv import VecHazardWorld

AGENT_KINDS = ("polco", "fusion", "random")
COST_SOURCES = ("predicted", "oracle")


@dataclass(frozen=True)
class Task:
    """One episode's map and the constraint(s) the agent is given."""

    grid_map: GridMap
    cases: Tuple[ConstraintCase, ...]

    @property
    def h_C(self) -> float:
        return float(min(c.spec.h_C for c in self.cases))


@dataclass(frozen=True)
class EpisodeRecord:
    reward: float
    cost: float
    predicted_cost: float
    h_C: float
    success: bool
    length: int
    spec_costs: Tuple[float, ...] = ()


class BagOfWords:
    """Normalised token-count vector used by the fusion baseline."""

    def __init__(self, texts: Sequence[str]):
        words = sorted({w for t in texts for w in tokenize(t)})
        self.index = {w: i for i, w in enumerate(words)}
        self.size = len(words)
        self._cache: Dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        if text not in self._cache:
            v = np.zeros(self.size)
            toks = tokenize(text)
            for w in toks:
                if w in self.index:
                    v[self.index[w]] += 1.0
            self._cache[text] = v / max(len(toks), 1)
        return self._cache[text]

    def encode_cases(self, cases: Sequence[ConstraintCase]) -> np.ndarray:
        return np.sum([self.encode(c.text.text) for c in cases], axis=0)

    def to_list(self) -> List[str]:
        return sorted(self.index, key=self.index.get)

    @classmethod
    def from_list(cls, words: Sequence[str]) -> "BagOfWords":
        bow = cls([])
        bow.index = {w: i for i, w in enumerate(words)}
        bow.size = len(words)
        return bow


@dataclass
class Agent:
    kind: str
    interpreter: object = None
    features: FeatureConfig = FeatureConfig()
    text_encoder: Optional[BagOfWords] = None
    _thresholds: Dict[Tuple[str, ...], float] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.kind == "polco" and self.interpreter is None:
            raise ValueError("polco agent needs an interpreter")
        if self.kind == "fusion" and self.text_encoder is None:
            raise ValueError("fusion agent needs a text encoder")

    @property
    def n_features(self) -> int:
        if self.kind == "polco":
            return self.features.n_features
        if self.kind == "fusion":
            return encode_fusion(np.zeros((1, 7, 7), dtype=np.int8), np.zeros(self.text_encoder.size)).shape[1]
        return 1

    def threshold(self, task: Task) -> float:
        """Predicted threshold for a task: the smallest over its constraints."""
        key = tuple(c.text.text for c in task.cases)
        if key not in self._thresholds:
            self._thresholds[key] = min(float(self.interpreter.threshold(c)) for c in task.cases)
        return self._thresholds[key]

    def masks(self, tasks: Sequence[Task], obs: np.ndarray, vis: np.ndarray) -> np.ndarray:
        n_specs = max(len(t.cases) for t in tasks)
        if n_specs == 1:
            return self.interpreter.masks([t.cases[0] for t in tasks], obs, vis)
        out = np.zeros(obs.shape, dtype=np.int8)
        for k in range(n_specs):
            rows = np.array([i for i, t in enumerate(tasks) if len(t.cases) > k])
            m = self.interpreter.masks([tasks[i].cases[k] for i in rows], obs[rows], vis[rows])
            out[rows] = merge_masks([out[rows], m])
        return out


TaskSampler = Callable[[np.random.Generator], Task]


def fixed_tasks(tasks: Sequence[Task]) -> TaskSampler:
    """Sampler cycling through ``tasks`` in order; makes evaluation sets exact."""
    state = {"i": 0}

    def sample(rng):
        t = tasks[state["i"] % len(tasks)]
        state["i"] += 1
        return t

    return sample


@dataclass
class RolloutConfig:
    n_envs: int = 64
    rewards: RewardTable = None
    cost_source: str = "predicted"

    def __post_init__(self):
        if self.cost_source not in COST_SOURCES:
            raise ValueError(f"unknown cost source {self.cost_source!r}")
        if self.rewards is None:
            raise ValueError("rollout config needs a reward table")


def collect(
    agent: Agent,
    policy: Optional[SoftmaxPolicy],
    theta: Optional[ParamVector],
    sample_task: TaskSampler,
    cfg: RolloutConfig,
    rng: np.random.Generator,
    min_steps: int = 0,
    n_episodes: int = 0,
    values: Optional[Tuple[LinearValue, ParamVector, ParamVector]] = None,
) -> Tuple[RolloutBatch, List[EpisodeRecord]]:
    """Run whole episodes until ``min_steps`` steps and ``n_episodes`` episodes are both reached."""
    if min_steps <= 0 and n_episodes <= 0:
        raise ValueError("need a positive step or episode target")
    steps: List[dict] = []
    episodes: List[EpisodeRecord] = []
    n_steps = 0
    while n_steps < min_steps or len(episodes) < n_episodes:
        n = cfg.n_envs
        if min_steps <= 0:
            n = min(n, n_episodes - len(episodes))
        wave, records = _run_wave(agent, policy, theta, [sample_task(rng) for _ in range(n)], cfg, rng, values)
        steps.append(wave)
        episodes.extend(records)
        n_steps += len(wave["actions"])
    batch = RolloutBatch(**{k: np.concatenate([w[k] for w in steps]) for k in steps[0] if k != "_oracle_costs"},
                         _oracle_costs=np.concatenate([w["_oracle_costs"] for w in steps]))
    return batch, episodes


def _run_wave(agent, policy, theta, tasks: List[Task], cfg: RolloutConfig, rng, values):
    n = len(tasks)
    sizes = {t.grid_map.size for t in tasks}
    if len(sizes) != 1:
        raise ValueError("all maps in a wave must share one grid size")
    n_specs = max(len(t.cases) for t in tasks)
    env = VecHazardWorld(n, sizes.pop(), cfg.rewards, max_specs=n_specs)
    for i, t in enumerate(tasks):
        env.reset(i, t.grid_map, [c.spec for c in t.cases])
    h_hat = np.array([agent.threshold(t) for t in tasks]) if agent.kind == "polco" else np.zeros(n)
    h_true = np.array([t.h_C for t in tasks])
    text_vec = np.stack([agent.text_encoder.encode_cases(t.cases) for t in tasks]) if agent.kind == "fusion" else None
    cum_pred = np.zeros(n)
    ep_reward = np.zeros(n)
    ep_cost = np.zeros((n, n_specs))
    positive = cfg.rewards.as_array() > 0
    n_pos = np.array([int(positive[np.unique(t.grid_map.cells)].sum()) for t in tasks])
    got_pos = np.zeros(n, dtype=np.int64)
    got_neg = np.zeros(n, dtype=bool)
    lookup = cfg.rewards.as_array()

    cols = {k: [] for k in ("env", "features", "actions", "log_probs", "rewards", "costs", "oracle", "thresholds")}
    active = np.arange(n)
    while active.size:
        obs = env.observe(active)
        if agent.kind == "polco":
            vis = env.visited_indicator(active)
            mask = agent.masks([tasks[i] for i in active], obs, vis)
            budget = np.where(mask > 0, (cum_pred[active] - h_hat[active])[:, None, None], 0.0)
            X = encode_inputs(obs, mask, budget, h_hat[active], agent.features)
        elif agent.kind == "fusion":
            X = encode_fusion(obs, text_vec[active])
        else:
            X = np.ones((len(active), 1))
        if agent.kind == "random":
            probs = np.full((len(active), N_ACTIONS), 1.0 / N_ACTIONS)
        else:
            probs = policy.probs(theta, X)
        u = rng.random(len(active))
        actions = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), N_ACTIONS - 1)
        if agent.kind == "polco":
            dest = env.destination_in_window(active, actions)
            pred = mask[np.arange(len(active)), dest[:, 0], dest[:, 1]].astype(float)
        else:
            pred = np.zeros(len(active))
        tp = env.pos[active] + MOVES[actions]
        target_kind = env.cells[active, tp[:, 0], tp[:, 1]].astype(np.int64)
        reward, spec_cost, moved, done = env.step(active, actions)
        entered = target_kind[moved]
        got_pos[active[moved]] += lookup[entered] > 0
        got_neg[active[moved]] |= lookup[entered] < 0
        oracle = spec_cost.sum(axis=1)
        cum_pred[active] += pred
        ep_reward[active] += reward
        ep_cost[active] += spec_cost

        cols["env"].append(active)
        cols["features"].append(X)
        cols["actions"].append(actions)
        cols["log_probs"].append(np.log(probs[np.arange(len(active)), actions]))
        cols["rewards"].append(reward)
        cols["costs"].append(pred if cfg.cost_source == "predicted" else oracle)
        cols["oracle"].append(oracle)
        cols["thresholds"].append(h_hat[active] if cfg.cost_source == "predicted" else h_true[active])
        active = active[~done]

    env_ids = np.concatenate(cols["env"])
    order = np.argsort(env_ids, kind="stable")
    env_ids = env_ids[order]
    flat = {k: np.concatenate(v)[order] for k, v in cols.items() if k != "env"}
    dones = np.append(env_ids[1:] != env_ids[:-1], True)
    wave = dict(
        features=flat["features"], actions=flat["actions"], log_probs=flat["log_probs"],
        rewards=flat["rewards"], costs=flat["costs"], dones=dones, thresholds=flat["thresholds"],
        _oracle_costs=flat["oracle"],
    )
    if values is not None and agent.kind != "random":
        vf, th_r, th_c = values
        wave["value_r"] = vf.predict(th_r, flat["features"])
        wave["value_c"] = vf.predict(th_c, flat["features"])
    else:
        wave["value_r"] = np.zeros(len(order))
        wave["value_c"] = np.zeros(len(order))
    lengths = np.bincount(env_ids, minlength=n)
    records = [
        EpisodeRecord(
            reward=float(ep_reward[i]),
            cost=float(ep_cost[i].sum()),
            predicted_cost=float(cum_pred[i]),
            h_C=float(h_true[i]),
            success=bool(got_pos[i] == n_pos[i] and not got_neg[i]),
            length=int(lengths[i]),
            spec_costs=tuple(float(c) for c in ep_cost[i, : len(tasks[i].cases)]),
        )
        for i in range(n)
    ]
    return wave, records


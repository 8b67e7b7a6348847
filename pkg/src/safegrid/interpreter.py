"""Constraint interpreter: text + observation -> per-cell constraint mask and threshold.

Two independent modules share one architecture for reading text:

* mask module: conv text encoder, then for every window cell a one-hidden-layer
  net over ``[text code, one-hots of the cell's Manhattan neighbourhood,
  visited indicator]`` producing a logit; trained with per-cell BCE.
* threshold module: its own conv text encoder followed by an affine read-out;
  trained with squared error.

The text encoder is a single 1-D convolution over token embeddings (window of
``left`` tokens before and ``right`` tokens after each position), ``tanh``,
then a max over positions. Sequence order matters for sequential constraints,
where the same two entity words play different roles.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .constraints import (
    Budgetary,
    ConstraintSpec,
    ConstraintText,
    ground_truth_mask,
    parse_constraint,
    to_dsl,
    tokenize,
    variant_name,
)
from .env import (
    CELL_CHARS,
    CHAR_CELLS,
    COST_ENTITIES,
    N_ACTIONS,
    N_KINDS,
    VIEW_SIZE,
    Entity,
    GenConfig,
    generate_map,
    observe,
    reset,
    step,
    train_rewards,
    visited_indicator,
)
from .params import ParamVector, load_params, save_params
from .vecenv import batch_masks

log = logging.getLogger(__name__)

UNK, PAD = "<unk>", "<pad>"
N_VISITED = len(COST_ENTITIES)
N_CELLS = VIEW_SIZE * VIEW_SIZE


class TrainingDivergedError(FloatingPointError):
    pass


# ------------------------------------------------------------------ vocabulary

@dataclass
class TokenVocab:
    index: Dict[str, int]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "TokenVocab":
        index = {UNK: 0, PAD: 1}
        for text in texts:
            for tok in tokenize(text):
                if tok not in index:
                    index[tok] = len(index)
        return cls(index)

    def __len__(self) -> int:
        return len(self.index)

    def encode(self, text: str) -> List[int]:
        return [self.index.get(tok, 0) for tok in tokenize(text)] or [0]

    def to_json(self) -> str:
        return json.dumps(sorted(self.index.items(), key=lambda kv: kv[1]))

    @classmethod
    def from_json(cls, blob: str) -> "TokenVocab":
        return cls({tok: int(i) for tok, i in json.loads(blob)})


@dataclass(frozen=True)
class FeatureConfig:
    embed_dim: int = 16
    channels: int = 32
    left: int = 3
    right: int = 1
    cell_radius: int = 2
    hidden: int = 64

    @property
    def window(self) -> int:
        return self.left + self.right + 1

    @property
    def offsets(self) -> List[Tuple[int, int]]:
        r = self.cell_radius
        return [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1) if abs(dr) + abs(dc) <= r]

    @property
    def n_cell_features(self) -> int:
        return len(self.offsets) * N_KINDS


# -------------------------------------------------------------------- features

def cell_indices(obs: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(B, 49, n_offsets) positions of the active entries of :func:`cell_features`."""
    obs = np.asarray(obs, dtype=np.int64).reshape(-1, VIEW_SIZE, VIEW_SIZE)
    r = config.cell_radius
    padded = np.pad(obs, ((0, 0), (r, r), (r, r)), constant_values=int(Entity.WALL))
    kinds = np.stack(
        [padded[:, r + dr : r + dr + VIEW_SIZE, r + dc : r + dc + VIEW_SIZE] for dr, dc in config.offsets],
        axis=-1,
    ).reshape(len(obs), N_CELLS, -1)
    return kinds + np.arange(kinds.shape[-1]) * N_KINDS


def cell_features(obs: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(B, 49, n_offsets * 8) one-hots of every cell's Manhattan neighbourhood."""
    idx = cell_indices(obs, config)
    onehot = np.zeros(idx.shape[:2] + (config.n_cell_features,))
    np.put_along_axis(onehot, idx, 1.0, axis=2)
    return onehot


def pad_texts(token_ids: Sequence[Sequence[int]], config: FeatureConfig) -> Tuple[np.ndarray, np.ndarray]:
    pad = 1
    longest = max(len(t) for t in token_ids)
    ids = np.full((len(token_ids), config.left + longest + config.right), pad, dtype=np.int64)
    valid = np.zeros((len(token_ids), longest), dtype=bool)
    for i, t in enumerate(token_ids):
        ids[i, config.left : config.left + len(t)] = t
        valid[i, : len(t)] = True
    return ids, valid


# ------------------------------------------------------------------ parameters

def _encoder_shapes(vocab_size: int, cfg: FeatureConfig) -> Dict[str, tuple]:
    return {
        "emb": (vocab_size, cfg.embed_dim),
        "conv_w": (cfg.channels, cfg.window * cfg.embed_dim),
        "conv_b": (cfg.channels,),
    }


def mask_param_shapes(vocab_size: int, cfg: FeatureConfig) -> Dict[str, tuple]:
    shapes = _encoder_shapes(vocab_size, cfg)
    shapes.update(
        W_text=(cfg.hidden, cfg.channels),
        W_cell=(cfg.hidden, cfg.n_cell_features),
        W_vis=(cfg.hidden, N_VISITED),
        b_hid=(cfg.hidden,),
        w_out=(cfg.hidden,),
        b_out=(1,),
    )
    return shapes


def threshold_param_shapes(vocab_size: int, cfg: FeatureConfig) -> Dict[str, tuple]:
    shapes = _encoder_shapes(vocab_size, cfg)
    shapes.update(w_thr=(cfg.channels,), b_thr=(1,))
    return shapes


@dataclass
class InterpreterParams:
    mask: ParamVector
    threshold: ParamVector
    vocab: TokenVocab
    config: FeatureConfig = field(default_factory=FeatureConfig)
    train_losses: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def zeros(cls, vocab: TokenVocab, config: FeatureConfig = FeatureConfig()) -> "InterpreterParams":
        return cls(
            ParamVector.zeros(mask_param_shapes(len(vocab), config)),
            ParamVector.zeros(threshold_param_shapes(len(vocab), config)),
            vocab,
            config,
        )

    @classmethod
    def initialize(cls, vocab: TokenVocab, config: FeatureConfig, rng: np.random.Generator) -> "InterpreterParams":
        p = cls.zeros(vocab, config)
        for pv in (p.mask, p.threshold):
            pv["emb"] = rng.normal(scale=1.0, size=pv["emb"].shape)
            pv["conv_w"] = rng.normal(scale=1.0 / np.sqrt(config.window * config.embed_dim), size=pv["conv_w"].shape)
        m = p.mask
        m["W_text"] = rng.normal(scale=1.0 / np.sqrt(config.channels), size=m["W_text"].shape)
        m["W_cell"] = rng.normal(scale=1.0 / np.sqrt(len(config.offsets)), size=m["W_cell"].shape)
        m["W_vis"] = rng.normal(scale=1.0, size=m["W_vis"].shape)
        m["w_out"] = rng.normal(scale=1.0 / np.sqrt(config.hidden), size=m["w_out"].shape)
        return p

    def is_finite(self) -> bool:
        return self.mask.is_finite() and self.threshold.is_finite()

    def save(self, path) -> None:
        meta = {"vocab": self.vocab.to_json(), "feature_config": asdict(self.config), "train_losses": self.train_losses}
        save_params(path, {"mask": self.mask, "threshold": self.threshold}, meta)

    @classmethod
    def load(cls, path) -> "InterpreterParams":
        pvs, meta = load_params(path)
        return cls(
            pvs["mask"],
            pvs["threshold"],
            TokenVocab.from_json(meta["vocab"]),
            FeatureConfig(**meta["feature_config"]),
            dict(meta.get("train_losses", {})),
        )


# ------------------------------------------------------------- forward/backward

def encode_text_forward(pv: ParamVector, ids: np.ndarray, valid: np.ndarray, cfg: FeatureConfig):
    emb = pv["emb"][ids]  # (U, L + left + right, e)
    L = valid.shape[1]
    windows = np.concatenate([emb[:, k : k + L, :] for k in range(cfg.window)], axis=2)
    H = np.tanh(windows @ pv["conv_w"].T + pv["conv_b"])
    masked = np.where(valid[:, :, None], H, -np.inf)
    arg = masked.argmax(axis=1)  # (U, C)
    codes = np.take_along_axis(H, arg[:, None, :], axis=1)[:, 0, :]
    return codes, (ids, windows, H, arg)


def encode_text_backward(pv: ParamVector, cache, d_codes: np.ndarray, cfg: FeatureConfig, grad: ParamVector):
    ids, windows, H, arg = cache
    U, L, C = H.shape
    dH = np.zeros_like(H)
    np.put_along_axis(dH, arg[:, None, :], d_codes[:, None, :], axis=1)
    dZ = dH * (1.0 - H**2)
    grad["conv_w"] += np.einsum("ulc,ulk->ck", dZ, windows)
    grad["conv_b"] += dZ.sum(axis=(0, 1))
    dwin = dZ @ pv["conv_w"]  # (U, L, window * e)
    e = cfg.embed_dim
    d_emb = grad["emb"]
    for k in range(cfg.window):
        np.add.at(d_emb, ids[:, k : k + L].ravel(), dwin[:, :, k * e : (k + 1) * e].reshape(-1, e))


def mask_logits(pv: ParamVector, codes: np.ndarray, cells: np.ndarray, vis: np.ndarray):
    """Per-cell logits (B, 49) given per-example text codes (B, C)."""
    pre = (
        (codes @ pv["W_text"].T + vis @ pv["W_vis"].T + pv["b_hid"])[:, None, :]
        + cells @ pv["W_cell"].T
    )
    hid = np.tanh(pre)
    return hid @ pv["w_out"] + pv["b_out"][0], hid


def _softplus(x):
    return np.logaddexp(0.0, x)


def mask_loss_and_grad(pv: ParamVector, cfg: FeatureConfig, ids, valid, text_idx, cells, vis, targets):
    """Mean per-cell binary cross-entropy and its gradient w.r.t. the mask parameters."""
    codes_u, cache = encode_text_forward(pv, ids, valid, cfg)
    codes = codes_u[text_idx]
    logits, hid = mask_logits(pv, codes, cells, vis)
    y = targets.reshape(len(targets), -1).astype(float)
    loss = float(np.mean(_softplus(logits) - y * logits))

    grad = pv.like(np.zeros(len(pv)))
    dlogit = (1.0 / (1.0 + np.exp(-logits)) - y) / y.size
    grad["w_out"] = np.einsum("bc,bch->h", dlogit, hid)
    grad["b_out"] = dlogit.sum()
    dpre = dlogit[:, :, None] * pv["w_out"] * (1.0 - hid**2)
    grad["W_cell"] = dpre.reshape(-1, dpre.shape[-1]).T @ cells.reshape(-1, cells.shape[-1])
    dsum = dpre.sum(axis=1)  # (B, H)
    grad["W_text"] = dsum.T @ codes
    grad["W_vis"] = dsum.T @ vis
    grad["b_hid"] = dsum.sum(axis=0)
    d_codes = np.zeros_like(codes_u)
    np.add.at(d_codes, text_idx, dsum @ pv["W_text"])
    encode_text_backward(pv, cache, d_codes, cfg, grad)
    return loss, grad.values


def threshold_loss_and_grad(pv: ParamVector, cfg: FeatureConfig, ids, valid, text_idx, targets):
    codes_u, cache = encode_text_forward(pv, ids, valid, cfg)
    pred = codes_u[text_idx] @ pv["w_thr"] + pv["b_thr"][0]
    err = pred - np.asarray(targets, dtype=float)
    loss = float(np.mean(err**2))
    grad = pv.like(np.zeros(len(pv)))
    dpred = 2.0 * err / len(err)
    codes = codes_u[text_idx]
    grad["w_thr"] = dpred @ codes
    grad["b_thr"] = dpred.sum()
    d_codes = np.zeros_like(codes_u)
    np.add.at(d_codes, text_idx, np.outer(dpred, pv["w_thr"]))
    encode_text_backward(pv, cache, d_codes, cfg, grad)
    return loss, grad.values


# --------------------------------------------------------------------- dataset

@dataclass(frozen=True)
class ConstraintCase:
    """A constraint as the agent receives it: the text, plus the spec used by oracles and metrics."""

    spec: ConstraintSpec
    text: ConstraintText


@dataclass(frozen=True)
class InterpreterExample:
    text: ConstraintText
    obs: np.ndarray
    visited_kinds: frozenset
    target_mask: np.ndarray
    target_threshold: float


@dataclass
class InterpreterDataset:
    """Column store of interpreter examples; indexing yields InterpreterExample."""

    cases: List[ConstraintCase]
    case_idx: np.ndarray
    obs: np.ndarray
    visited: np.ndarray
    target_mask: np.ndarray
    target_threshold: np.ndarray
    map_seed: np.ndarray
    timestep: np.ndarray

    def __len__(self) -> int:
        return len(self.case_idx)

    def __getitem__(self, i: int) -> InterpreterExample:
        vis = frozenset(k for k, v in zip(COST_ENTITIES, self.visited[i]) if v)
        return InterpreterExample(
            self.cases[self.case_idx[i]].text, self.obs[i], vis, self.target_mask[i], float(self.target_threshold[i])
        )

    def subset(self, rows: np.ndarray) -> "InterpreterDataset":
        rows = np.asarray(rows)
        return InterpreterDataset(
            self.cases, self.case_idx[rows], self.obs[rows], self.visited[rows], self.target_mask[rows],
            self.target_threshold[rows], self.map_seed[rows], self.timestep[rows],
        )

    def save(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                case = self.cases[self.case_idx[i]]
                rec = {
                    "map_seed": int(self.map_seed[i]),
                    "dsl": to_dsl(case.spec),
                    "template_id": case.text.template_id,
                    "text": case.text.text,
                    "timestep": int(self.timestep[i]),
                    "obs": "".join(CELL_CHARS[Entity(v)] for v in self.obs[i].ravel()),
                    "visited": [int(v) for v in self.visited[i]],
                    "mask": "".join(str(int(v)) for v in self.target_mask[i].ravel()),
                    "threshold": float(self.target_threshold[i]),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "InterpreterDataset":
        cases, lookup = [], {}
        cols = {k: [] for k in ("case_idx", "obs", "visited", "mask", "thr", "seed", "t")}
        with open(Path(path), encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                key = (rec["dsl"], rec["text"], rec["template_id"])
                if key not in lookup:
                    lookup[key] = len(cases)
                    cases.append(ConstraintCase(parse_constraint(rec["dsl"]), ConstraintText(rec["text"], rec["template_id"])))
                cols["case_idx"].append(lookup[key])
                cols["obs"].append([CHAR_CELLS[c] for c in rec["obs"]])
                cols["visited"].append(rec["visited"])
                cols["mask"].append([int(c) for c in rec["mask"]])
                cols["thr"].append(rec["threshold"])
                cols["seed"].append(rec["map_seed"])
                cols["t"].append(rec["timestep"])
        return cls(
            cases,
            np.array(cols["case_idx"], dtype=np.int64),
            np.array(cols["obs"], dtype=np.int8).reshape(-1, VIEW_SIZE, VIEW_SIZE),
            np.array(cols["visited"], dtype=float).reshape(-1, N_VISITED),
            np.array(cols["mask"], dtype=np.int8).reshape(-1, VIEW_SIZE, VIEW_SIZE),
            np.array(cols["thr"], dtype=float),
            np.array(cols["seed"], dtype=np.int64),
            np.array(cols["t"], dtype=np.int64),
        )


@dataclass(frozen=True)
class CollectConfig:
    gen_configs: Tuple[GenConfig, ...] = (GenConfig(grid_size=7, cells_per_cost_kind=4),)
    max_steps: int = 200


def collect_interpreter_data(
    env_config: CollectConfig,
    constraint_pool: Sequence[ConstraintCase],
    n_trajectories: int,
    seed: int,
) -> InterpreterDataset:
    """Random-policy rollouts labelled with ground-truth masks and thresholds."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    if not constraint_pool:
        raise ValueError("constraint pool is empty")
    rng = np.random.default_rng(seed)
    cases = list(constraint_pool)
    rewards = train_rewards(env_config.max_steps)
    cols = {k: [] for k in ("case", "obs", "vis", "mask", "thr", "seed", "t")}
    for _ in range(n_trajectories):
        case_i = int(rng.integers(len(cases)))
        spec = cases[case_i].spec
        gen = env_config.gen_configs[int(rng.integers(len(env_config.gen_configs)))]
        map_seed = int(rng.integers(2**62))
        state = reset(generate_map(map_seed, gen), env_config.max_steps)
        actions = rng.integers(N_ACTIONS, size=env_config.max_steps)
        t = 0
        while not state.done:
            obs = observe(state)
            cols["case"].append(case_i)
            cols["obs"].append(obs)
            cols["vis"].append(visited_indicator(state.visited_kinds))
            cols["mask"].append(ground_truth_mask(obs, spec, state.visited_kinds))
            cols["thr"].append(float(spec.h_C))
            cols["seed"].append(map_seed)
            cols["t"].append(t)
            state, _, _ = step(state, int(actions[t]), rewards)
            t += 1
    return InterpreterDataset(
        cases,
        np.array(cols["case"], dtype=np.int64),
        np.array(cols["obs"], dtype=np.int8),
        np.array(cols["vis"], dtype=float),
        np.array(cols["mask"], dtype=np.int8),
        np.array(cols["thr"], dtype=float),
        np.array(cols["seed"], dtype=np.int64),
        np.array(cols["t"], dtype=np.int64),
    )


# ------------------------------------------------------------------ interpreters

class LearnedInterpreter:
    """Inference wrapper around trained parameters, caching text codes per text."""

    def __init__(self, params: InterpreterParams):
        self.params = params
        self._mask_codes: Dict[str, np.ndarray] = {}
        self._thresholds: Dict[str, float] = {}
        self._cell_table: Optional[np.ndarray] = None

    def _codes(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._mask_codes]
        if missing:
            ids, valid = pad_texts([self.params.vocab.encode(t) for t in missing], self.params.config)
            codes, _ = encode_text_forward(self.params.mask, ids, valid, self.params.config)
            self._mask_codes.update(zip(missing, codes))
        return np.stack([self._mask_codes[t] for t in texts])

    def mask_probs(self, cases: Sequence[ConstraintCase], obs: np.ndarray, vis: np.ndarray) -> np.ndarray:
        codes = self._codes([c.text.text for c in cases])
        pv = self.params.mask
        if self._cell_table is None:
            self._cell_table = np.ascontiguousarray(pv["W_cell"].T, dtype=np.float32)
        vis = np.asarray(vis, dtype=float).reshape(len(cases), -1)
        # one-hot cell features times W_cell in single precision
        idx = cell_indices(obs, self.params.config).reshape(-1, len(self.params.config.offsets))
        onehot = np.zeros((len(idx), self._cell_table.shape[0]), dtype=np.float32)
        np.put_along_axis(onehot, idx, 1.0, axis=1)
        cell_term = (onehot @ self._cell_table).reshape(len(cases), N_CELLS, -1)
        row = (codes @ pv["W_text"].T + vis @ pv["W_vis"].T + pv["b_hid"]).astype(np.float32)
        logits = np.tanh(row[:, None, :] + cell_term) @ pv["w_out"].astype(np.float32) + pv["b_out"][0]
        return (1.0 / (1.0 + np.exp(-logits.astype(float)))).reshape(-1, VIEW_SIZE, VIEW_SIZE)

    def masks(self, cases, obs, vis) -> np.ndarray:
        return (self.mask_probs(cases, obs, vis) >= 0.5).astype(np.int8)

    def threshold(self, case: ConstraintCase) -> float:
        key = case.text.text
        if key not in self._thresholds:
            ids, valid = pad_texts([self.params.vocab.encode(key)], self.params.config)
            codes, _ = encode_text_forward(self.params.threshold, ids, valid, self.params.config)
            self._thresholds[key] = float(codes[0] @ self.params.threshold["w_thr"] + self.params.threshold["b_thr"][0])
        return self._thresholds[key]


def _visited_set(vis_row) -> frozenset:
    return frozenset(k for k, v in zip(COST_ENTITIES, vis_row) if v)


class OracleInterpreter:
    """Returns ground-truth masks and thresholds; ignores the text."""

    def __init__(self, spec: Optional[ConstraintSpec] = None):
        self.spec = spec

    def _spec(self, case) -> ConstraintSpec:
        return self.spec if self.spec is not None else case.spec

    def mask_probs(self, cases, obs, vis) -> np.ndarray:
        return self.masks(cases, obs, vis).astype(float)

    def masks(self, cases, obs, vis) -> np.ndarray:
        return batch_masks([self._spec(c) for c in cases], obs, vis)

    def threshold(self, case=None) -> float:
        return float(self._spec(case).h_C)

    # single-example API
    def predict_mask(self, text, obs, visited_indicator) -> np.ndarray:
        return ground_truth_mask(np.asarray(obs), self.spec, _visited_set(visited_indicator)).astype(float)

    def predict_threshold(self, text=None) -> float:
        return float(self.spec.h_C)


def oracle_interpreter(spec: ConstraintSpec) -> OracleInterpreter:
    return OracleInterpreter(spec)


class PerClassInterpreter:
    """One learned interpreter per constraint variant, dispatched on the case's spec."""

    def __init__(self, members: Dict[str, LearnedInterpreter]):
        self.members = members

    def mask_probs(self, cases, obs, vis):
        out = np.zeros((len(cases), VIEW_SIZE, VIEW_SIZE))
        names = np.array([variant_name(c.spec) for c in cases])
        for name, member in self.members.items():
            rows = np.nonzero(names == name)[0]
            if rows.size:
                out[rows] = member.mask_probs([cases[i] for i in rows], np.asarray(obs)[rows], np.asarray(vis)[rows])
        return out

    def masks(self, cases, obs, vis):
        return (self.mask_probs(cases, obs, vis) >= 0.5).astype(np.int8)

    def threshold(self, case):
        return self.members[variant_name(case.spec)].threshold(case)


def predict_mask(params: InterpreterParams, text: ConstraintText, obs: np.ndarray, visited: np.ndarray) -> np.ndarray:
    """Per-cell probabilities (7, 7) for a single observation."""
    case = ConstraintCase(Budgetary(Entity.LAVA, 0), text)  # spec unused by the learned path
    return LearnedInterpreter(params).mask_probs([case], np.asarray(obs)[None], np.asarray(visited)[None])[0]


def predict_threshold(params: InterpreterParams, text: ConstraintText) -> float:
    case = ConstraintCase(Budgetary(Entity.LAVA, 0), text)
    return LearnedInterpreter(params).threshold(case)


# -------------------------------------------------------------------- training

@dataclass(frozen=True)
class InterpreterHyper:
    lr: float = 3e-3
    epochs: int = 4
    batch_size: int = 256
    seed: int = 0
    word_dropout: float = 0.15
    config: FeatureConfig = FeatureConfig()


class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _text_table(dataset: InterpreterDataset, vocab: TokenVocab, cfg: FeatureConfig):
    ids, valid = pad_texts([vocab.encode(c.text.text) for c in dataset.cases], cfg)
    return ids, valid


def _drop_words(ids, valid, rate, cfg, rng):
    """Replace a random fraction of real tokens by UNK."""
    ids = ids.copy()
    body = ids[:, cfg.left : cfg.left + valid.shape[1]]
    body[valid & (rng.random(valid.shape) < rate)] = 0
    return ids


def _batch_texts(ids, valid, case_idx):
    """Restrict the text table to the texts used by a batch and remap indices."""
    used, local = np.unique(case_idx, return_inverse=True)
    return ids[used], valid[used], local


def train_interpreter(
    dataset: InterpreterDataset,
    hyper: InterpreterHyper = InterpreterHyper(),
    vocab: Optional[TokenVocab] = None,
) -> InterpreterParams:
    """Fit the mask module (BCE) and the threshold module (MSE) independently with Adam."""
    if len(dataset) == 0:
        raise ValueError("empty interpreter dataset")
    cfg = hyper.config
    vocab = vocab or TokenVocab.build(c.text.text for c in dataset.cases)
    rng = np.random.default_rng(hyper.seed)
    params = InterpreterParams.initialize(vocab, cfg, rng)
    params.threshold["b_thr"] = float(np.mean(dataset.target_threshold))
    ids, valid = _text_table(dataset, vocab, cfg)
    opt_m = Adam(len(params.mask), hyper.lr)
    opt_t = Adam(len(params.threshold), hyper.lr)
    n = len(dataset)
    losses = {}
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        tot_m = tot_t = 0.0
        for start in range(0, n, hyper.batch_size):
            rows = order[start : start + hyper.batch_size]
            b_ids, b_valid, local = _batch_texts(ids, valid, dataset.case_idx[rows])
            if hyper.word_dropout > 0:
                b_ids = _drop_words(b_ids, b_valid, hyper.word_dropout, cfg, rng)
            cells = cell_features(dataset.obs[rows], cfg)
            lm, gm = mask_loss_and_grad(
                params.mask, cfg, b_ids, b_valid, local, cells, dataset.visited[rows], dataset.target_mask[rows]
            )
            lt, gt = threshold_loss_and_grad(params.threshold, cfg, b_ids, b_valid, local, dataset.target_threshold[rows])
            if not (np.isfinite(lm) and np.isfinite(lt)):
                raise TrainingDivergedError(
                    f"non-finite interpreter loss at epoch {epoch}, batch {start // hyper.batch_size}: "
                    f"mask={lm}, threshold={lt}"
                )
            params.mask.values = opt_m.step(params.mask.values, gm)
            params.threshold.values = opt_t.step(params.threshold.values, gt)
            tot_m += lm * len(rows)
            tot_t += lt * len(rows)
        losses = {"mask_bce": tot_m / n, "threshold_mse": tot_t / n}
        log.info("interpreter epoch %d: bce=%.5f mse=%.5f", epoch, losses["mask_bce"], losses["threshold_mse"])
    params.train_losses = losses
    return params


def train_per_class(dataset: InterpreterDataset, hyper: InterpreterHyper = InterpreterHyper()) -> PerClassInterpreter:
    names = np.array([variant_name(dataset.cases[i].spec) for i in dataset.case_idx])
    members = {}
    for name in dict.fromkeys(names):
        members[name] = LearnedInterpreter(train_interpreter(dataset.subset(np.nonzero(names == name)[0]), hyper))
    return PerClassInterpreter(members)


def evaluate_interpreter(interp, dataset: InterpreterDataset, batch_size: int = 2048) -> Dict[str, float]:
    """Per-cell mask accuracy and threshold MSE on a dataset."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        rows = np.arange(start, min(start + batch_size, len(dataset)))
        cases = [dataset.cases[i] for i in dataset.case_idx[rows]]
        pred = interp.masks(cases, dataset.obs[rows], dataset.visited[rows])
        correct += int(np.sum(pred == dataset.target_mask[rows]))
    per_case = np.array([interp.threshold(c) for c in dataset.cases])
    mse = float(np.mean((per_case[dataset.case_idx] - dataset.target_threshold) ** 2))
    return {"mask_accuracy": correct / (len(dataset) * N_CELLS), "threshold_mse": mse}

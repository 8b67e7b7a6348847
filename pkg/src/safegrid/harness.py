"""Experiment orchestration: datasets, two-stage safety training, evaluation and baselines.

Everything is seeded from explicit integers; two calls with the same
:class:`HarnessConfig` give identical numbers.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .constraints import (
    Budgetary,
    ConstraintSpec,
    ConstraintText,
    Relational,
    Sequential,
    default_bank,
    parse_constraint,
    render_template,
    to_dsl,
    variant_name,
)
from .env import COST_ENTITIES, GenConfig, RewardTable, eval_rewards, generate_map, train_rewards
from .interpreter import (
    CollectConfig,
    ConstraintCase,
    InterpreterHyper,
    InterpreterParams,
    LearnedInterpreter,
    OracleInterpreter,
    collect_interpreter_data,
    train_interpreter,
)
from .params import ParamVector, load_params, save_params
from .policy import FeatureConfig, LinearValue, SoftmaxPolicy
from .rollout import Agent, BagOfWords, EpisodeRecord, RolloutConfig, Task, collect, fixed_tasks
from .safeopt import (
    OptimizationError,
    OracleAudit,
    TrustRegionConfig,
    discounted_returns,
    has_regressed,
    pcpo_update,
    penalized_trpo_update,
    space_update,
    trpo_update,
    update_h_D,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "eval")
ALGOS = ("pcpo", "space", "trpo", "penalized")
BASELINES = ("random_walk", "cf_trpo", "cf_pcpo", "penalized_trpo")
METRIC_FIELDS = ("algo", "split", "h_C", "seed", "J_R", "J_C", "delta_C", "success_rate", "episodes")


class ManifestError(ValueError):
    pass


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class HarnessConfig:
    """Every knob of a run. Defaults are the desk-scale settings."""

    seed: int = 0
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 1
    # maps and episodes
    grid_size: int = 7
    cells_per_cost_kind: int = 4
    max_steps: int = 60
    n_train_maps: int = 200
    n_eval_maps: int = 50
    # constraint pool
    pool_variants: Tuple[str, ...] = ("budget",)
    pool_thresholds: Tuple[int, ...] = (0, 2, 4)
    pool_distances: Tuple[int, ...] = (1, 2)
    # stage 1
    interp_trajectories: int = 3400
    interp_grid_sizes: Tuple[int, ...] = (5, 6, 7)
    interp_max_steps: int = 60
    interp_epochs: int = 3
    interp_lr: float = 3e-3
    interp_batch_size: int = 256
    interp_word_dropout: float = 0.15
    # stage 2
    algo: str = "pcpo"
    n_updates: int = 300
    batch_steps: int = 2000
    n_envs: int = 48
    hidden: int = 0
    use_mask: bool = True
    use_budget: bool = True
    use_threshold: bool = True
    value_ridge: float = 1e-4
    penalty_weight: float = 1.0
    h_D_init: float = 0.05
    delta: float = 1e-3
    gamma: float = 0.99
    gamma_c: float = 1.0
    lam_r: float = 0.95
    lam_c: float = 0.9
    cg_iters: int = 10
    damping: float = 1e-4
    projection: str = "KL"
    constraint_grouping: str = "worst"
    # evaluation
    fine_tune_updates: int = 100
    eval_episodes: int = 500

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}; expected one of {ALGOS}")
        for v in self.pool_variants:
            if v not in ("budget", "relation", "sequence"):
                raise ValueError(f"unknown constraint variant {v!r}")
        if self.n_updates < 0 or self.fine_tune_updates < 0:
            raise ValueError("update counts must be non-negative")
        if self.batch_steps < 1 or self.n_envs < 1 or self.eval_episodes < 1:
            raise ValueError("batch_steps, n_envs and eval_episodes must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")
        self.trust_region  # validates the optimiser fields

    @property
    def trust_region(self) -> TrustRegionConfig:
        return TrustRegionConfig(
            delta=self.delta, gamma=self.gamma, gamma_c=self.gamma_c, lam_r=self.lam_r, lam_c=self.lam_c,
            cg_iters=self.cg_iters, damping=self.damping, projection=self.projection,
            constraint_grouping=self.constraint_grouping,
        )

    @property
    def gen_config(self) -> GenConfig:
        return GenConfig(grid_size=self.grid_size, cells_per_cost_kind=self.cells_per_cost_kind)

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.use_mask, self.use_budget, self.use_threshold)

    @property
    def interpreter_hyper(self) -> InterpreterHyper:
        return InterpreterHyper(
            lr=self.interp_lr, epochs=self.interp_epochs, batch_size=self.interp_batch_size,
            seed=self.seed, word_dropout=self.interp_word_dropout,
        )

    def rewards(self, split: str) -> RewardTable:
        return train_rewards(self.max_steps) if split == "train" else eval_rewards(self.max_steps)


def constraint_pool(config: HarnessConfig) -> List[ConstraintSpec]:
    """All specs spanned by the configured variants, thresholds and distances."""
    pool: List[ConstraintSpec] = []
    for v in config.pool_variants:
        if v == "budget":
            pool += [Budgetary(e, h) for e in COST_ENTITIES for h in config.pool_thresholds]
        elif v == "relation":
            pool += [Relational(e, d) for e in COST_ENTITIES for d in config.pool_distances]
        else:
            pool += [Sequential(t, f) for t in COST_ENTITIES for f in COST_ENTITIES if t != f]
    return pool


# ---------------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    map_seed: int
    dsl: str
    template_id: int
    text: str

    def case(self) -> ConstraintCase:
        return ConstraintCase(parse_constraint(self.dsl), ConstraintText(self.text, self.template_id))


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    entries: Tuple[ManifestEntry, ...]
    reward_table_id: str

    def __post_init__(self):
        if self.split not in SPLITS or self.reward_table_id not in SPLITS:
            raise ManifestError(f"bad split/reward table: {self.split}/{self.reward_table_id}")
        if not self.entries:
            raise ManifestError("manifest has no entries")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({"split": self.split, **asdict(e)}) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        entries, splits = [], set()
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    splits.add(rec["split"])
                    entries.append(ManifestEntry(int(rec["map_seed"]), rec["dsl"], int(rec["template_id"]), rec["text"]))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ManifestError(f"{path}:{n}: malformed record ({exc})") from exc
        if len(splits) != 1:
            raise ManifestError(f"{path}: expected exactly one split, found {sorted(splits)}")
        split = splits.pop()
        return cls(split, tuple(entries), split)

    def tasks(self, gen: GenConfig) -> List[Task]:
        maps: Dict[int, object] = {}
        out = []
        for e in self.entries:
            if e.map_seed not in maps:
                maps[e.map_seed] = generate_map(e.map_seed, gen)
            out.append(Task(maps[e.map_seed], (e.case(),)))
        return out


def gen_dataset(seed: int, n_train_maps: int, n_eval_maps: int, pool: Sequence[ConstraintSpec], bank=None):
    """Train/eval manifests with disjoint map seeds and disjoint phrasing templates.

    The template bank's training block (80% of each variant's templates) feeds
    the train split; its held-out block feeds the eval split.
    """
    if not pool:
        raise ManifestError("constraint pool is empty")
    if n_train_maps < 1 or n_eval_maps < 1:
        raise ManifestError("need at least one map per split")
    bank = bank or default_bank()
    for v in {variant_name(s) for s in pool}:
        if not bank.ids(v, "train") or not bank.ids(v, "heldout"):
            raise ManifestError(f"too few templates to split variant {v!r}")
    rng = np.random.default_rng(seed)
    half = 2**62
    train_seeds = rng.choice(half, size=n_train_maps, replace=False)
    eval_seeds = half + rng.choice(half, size=n_eval_maps, replace=False)
    out = []
    for split, seeds in (("train", train_seeds), ("eval", eval_seeds)):
        entries = []
        for s in seeds:
            spec = pool[int(rng.integers(len(pool)))]
            ids = bank.ids(variant_name(spec), split)
            tid = ids[int(rng.integers(len(ids)))]
            entries.append(ManifestEntry(int(s), to_dsl(spec), tid, render_template(spec, tid, bank).text))
        out.append(DatasetManifest(split, tuple(entries), split))
    return out[0], out[1]


# ------------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class MetricsReport:
    J_R: float
    J_C: float
    delta_C: float
    success_rate: float
    n_episodes: int
    h_C: float
    seeds: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.delta_C < 0:
            raise ValueError("delta_C must be non-negative")


def compute_metrics(episodes: Sequence[EpisodeRecord], h_C: Optional[float] = None, seeds: Iterable[int] = ()) -> MetricsReport:
    if not episodes:
        raise ValueError("no episodes to summarise")
    if h_C is None:
        hs = {e.h_C for e in episodes}
        if len(hs) != 1:
            raise ValueError(f"episodes carry several thresholds {sorted(hs)}; pass h_C")
        h_C = hs.pop()
    J_R = float(np.mean([e.reward for e in episodes]))
    J_C = float(np.mean([e.cost for e in episodes]))
    return MetricsReport(
        J_R=J_R, J_C=J_C, delta_C=max(0.0, J_C - float(h_C)),
        success_rate=float(np.mean([e.success for e in episodes])),
        n_episodes=len(episodes), h_C=float(h_C), seeds=tuple(seeds),
    )


def metrics_by_threshold(episodes: Sequence[EpisodeRecord], seeds: Iterable[int] = ()) -> Dict[float, MetricsReport]:
    groups: Dict[float, List[EpisodeRecord]] = {}
    for e in episodes:
        groups.setdefault(e.h_C, []).append(e)
    return {h: compute_metrics(groups[h], h, seeds) for h in sorted(groups)}


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Median over per-seed reports of one (algo, split, h_C) cell."""
    if not reports:
        raise ValueError("nothing to aggregate")
    med = lambda name: float(np.median([getattr(r, name) for r in reports]))  # noqa: E731
    return MetricsReport(
        J_R=med("J_R"), J_C=med("J_C"), delta_C=med("delta_C"), success_rate=med("success_rate"),
        n_episodes=int(sum(r.n_episodes for r in reports)), h_C=reports[0].h_C,
        seeds=tuple(s for r in reports for s in r.seeds),
    )


def metric_rows(algo: str, split: str, seed, reports: Dict[float, MetricsReport]) -> List[dict]:
    return [
        {"algo": algo, "split": split, "h_C": h, "seed": seed, "J_R": r.J_R, "J_C": r.J_C,
         "delta_C": r.delta_C, "success_rate": r.success_rate, "episodes": r.n_episodes}
        for h, r in reports.items()
    ]


def median_rows(rows: Sequence[dict]) -> List[dict]:
    """Per (algo, split, h_C) medians over seeds, as extra rows with seed='median'."""
    cells: Dict[tuple, List[dict]] = {}
    for r in rows:
        if r["seed"] != "median":
            cells.setdefault((r["algo"], r["split"], float(r["h_C"])), []).append(r)
    out = []
    for (algo, split, h), group in sorted(cells.items()):
        row = {"algo": algo, "split": split, "h_C": h, "seed": "median"}
        for k in ("J_R", "J_C", "delta_C", "success_rate"):
            row[k] = float(np.median([float(g[k]) for g in group]))
        row["episodes"] = int(sum(int(g["episodes"]) for g in group))
        out.append(row)
    return out


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("h_C", "J_R", "J_C", "delta_C", "success_rate"):
            r[k] = float(r[k])
        r["episodes"] = int(r["episodes"])
    return rows


# ----------------------------------------------------------------- policy artifacts

@dataclass
class PolicyArtifact:
    kind: str
    features: FeatureConfig
    hidden: int
    theta: Optional[ParamVector] = None
    value_r: Optional[ParamVector] = None
    value_c: Optional[ParamVector] = None
    vocab: Tuple[str, ...] = ()

    def agent(self, interpreter=None) -> Agent:
        encoder = BagOfWords.from_list(self.vocab) if self.kind == "fusion" else None
        return Agent(self.kind, interpreter if self.kind == "polco" else None, self.features, encoder)

    def policy(self) -> Optional[SoftmaxPolicy]:
        if self.kind == "random":
            return None
        return SoftmaxPolicy(self.agent(_NULL_INTERPRETER).n_features, self.hidden)

    def save(self, path) -> None:
        pvs = {k: v for k, v in (("theta", self.theta), ("value_r", self.value_r), ("value_c", self.value_c)) if v is not None}
        meta = {"kind": self.kind, "features": asdict(self.features), "hidden": self.hidden, "vocab": list(self.vocab)}
        save_params(path, pvs, meta)

    @classmethod
    def load(cls, path) -> "PolicyArtifact":
        pvs, meta = load_params(path)
        return cls(meta["kind"], FeatureConfig(**meta["features"]), int(meta["hidden"]), pvs.get("theta"),
                   pvs.get("value_r"), pvs.get("value_c"), tuple(meta["vocab"]))


_NULL_INTERPRETER = OracleInterpreter()


@dataclass
class TrainingLog:
    rows: List[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        keys = list(self.rows[0])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in keys])


def uniform_sampler(tasks: Sequence[Task]):
    def sample(rng):
        return tasks[int(rng.integers(len(tasks)))]

    return sample


def train_policy(
    artifact: PolicyArtifact,
    interpreter,
    tasks: Sequence[Task],
    rewards: RewardTable,
    config: HarnessConfig,
    seed: int,
    algo: str,
    n_updates: int,
    cost_source: str = "predicted",
    tag: str = "",
) -> Tuple[PolicyArtifact, TrainingLog]:
    """Run ``n_updates`` on-policy updates starting from ``artifact`` (mutates a copy)."""
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}")
    agent = artifact.agent(interpreter)
    policy = artifact.policy()
    rng = np.random.default_rng([seed, _stream(tag)])
    theta = artifact.theta.copy() if artifact.theta is not None else policy.init_params(rng)
    vf = LinearValue(agent.n_features, ridge=config.value_ridge)
    th_r = artifact.value_r.copy() if artifact.value_r is not None else vf.init_params()
    th_c = artifact.value_c.copy() if artifact.value_c is not None else vf.init_params()
    tr = config.trust_region
    rcfg = RolloutConfig(n_envs=config.n_envs, rewards=rewards, cost_source=cost_source)
    sampler = uniform_sampler(tasks)
    theta_b, h_D = theta.copy(), config.h_D_init
    hist_c: List[float] = []
    hist_r: List[float] = []
    out_log = TrainingLog()
    for k in range(n_updates):
        batch, episodes = collect(agent, policy, theta, sampler, rcfg, rng, min_steps=config.batch_steps,
                                  values=(vf, th_r, th_c))
        with OracleAudit():
            if algo == "pcpo":
                theta, info = pcpo_update(policy, theta, batch, None, tr)
            elif algo == "trpo":
                theta, info = trpo_update(policy, theta, batch, tr)
            elif algo == "penalized":
                theta, info = penalized_trpo_update(policy, theta, batch, config.penalty_weight, tr)
            else:
                theta, info = space_update(policy, theta, batch, theta_b, None, h_D, tr)
                hist_c.append(info["J_C"])
                hist_r.append(info["J_R"])
                h_D = update_h_D(info["J_C"], float(np.mean(batch.episode_thresholds())), h_D,
                                 has_regressed(hist_c, hist_r))
        if not theta.is_finite():
            raise OptimizationError(f"non-finite policy parameters after update {k}")
        targets = np.stack([discounted_returns(batch.rewards, batch.dones, tr.gamma),
                            discounted_returns(batch.costs, batch.dones, tr.gamma_c)], axis=1)
        th_r, th_c = vf.fit_many(th_r, batch.features, targets)
        J_C = float(np.mean([e.cost for e in episodes]))
        out_log.rows.append({
            "update": k,
            "J_R": float(np.mean([e.reward for e in episodes])),
            "J_C": J_C,
            "J_C_predicted": float(np.mean([e.predicted_cost for e in episodes])),
            "delta_C": float(np.mean([max(0.0, e.cost - e.h_C) for e in episodes])),
            "kl": float(info["kl"]),
            "projection_active": bool(info.get("projection_active", False)),
            "recovery": bool(info.get("recovery", False)),
            "h_D": float(h_D) if algo == "space" else float("nan"),
            "wall_time": float(info["wall_time"]),
            "episodes": len(episodes),
        })
    trained = replace(artifact, theta=theta, value_r=th_r, value_c=th_c)
    return trained, out_log


def _stream(tag: str) -> int:
    """Stable integer for an RNG sub-stream name."""
    return int.from_bytes(tag.encode("utf-8")[:8].ljust(8, b"\0"), "little")


def new_artifact(kind: str, config: HarnessConfig, vocab: Sequence[str] = ()) -> PolicyArtifact:
    return PolicyArtifact(kind, config.feature_config, config.hidden, vocab=tuple(vocab))


def evaluate(artifact: PolicyArtifact, interpreter, tasks: Sequence[Task], rewards: RewardTable,
             config: HarnessConfig, seed: int, n_episodes: Optional[int] = None) -> List[EpisodeRecord]:
    """Roll out the policy over ``tasks`` in order (cycling) and return the episode records."""
    agent = artifact.agent(interpreter)
    rng = np.random.default_rng([seed, _stream("evaluate")])
    rcfg = RolloutConfig(n_envs=config.n_envs, rewards=rewards)
    _, episodes = collect(agent, artifact.policy(), artifact.theta, fixed_tasks(tasks), rcfg, rng,
                          n_episodes=n_episodes or config.eval_episodes)
    return episodes


# ------------------------------------------------------------------ the protocol

def stage1_pool(manifest: DatasetManifest) -> List[ConstraintCase]:
    """Every (spec, template) combination seen in the manifest, rendered fresh."""
    bank = default_bank()
    specs = sorted({e.dsl for e in manifest.entries})
    tids = sorted({e.template_id for e in manifest.entries})
    cases = []
    for dsl in specs:
        spec = parse_constraint(dsl)
        for tid in tids:
            if tid in bank.ids(variant_name(spec), manifest.split):
                cases.append(ConstraintCase(spec, render_template(spec, tid, bank)))
    return cases


def train_stage1(manifest: DatasetManifest, config: HarnessConfig) -> InterpreterParams:
    gens = tuple(
        GenConfig(grid_size=g, cells_per_cost_kind=_cells_for(g, config.cells_per_cost_kind))
        for g in config.interp_grid_sizes
    )
    data = collect_interpreter_data(CollectConfig(gens, config.interp_max_steps), stage1_pool(manifest),
                                    config.interp_trajectories, config.seed)
    log.info("stage 1: %d examples", len(data))
    return train_interpreter(data, config.interpreter_hyper)


def _cells_for(grid: int, cells: int) -> int:
    """Cost cells per kind that still fit a grid of this size."""
    interior = (grid - 2) ** 2
    return max(1, min(cells, (interior - 4) // len(COST_ENTITIES) - 1))


def safety_training(train_manifest: DatasetManifest, config: HarnessConfig, seed: int,
                    interpreter=None) -> Tuple[Optional[InterpreterParams], PolicyArtifact, TrainingLog]:
    """Stage 1 (unless an interpreter is supplied) then Stage 2 with interpreter-predicted costs."""
    params = None
    if interpreter is None:
        params = train_stage1(train_manifest, config)
        interpreter = LearnedInterpreter(params)
    art, tlog = train_policy(new_artifact("polco", config), interpreter, train_manifest.tasks(config.gen_config),
                             config.rewards("train"), config, seed, config.algo, config.n_updates, tag="stage2")
    return params, art, tlog


def eval_transfer(artifact: PolicyArtifact, interpreter, eval_manifest: DatasetManifest, fine_tune_updates: int,
                  config: HarnessConfig, seed: int, cost_source: str = "predicted", algo: Optional[str] = None):
    """Fine-tune on the eval reward table (interpreter costs only), then report against oracle costs."""
    tasks = eval_manifest.tasks(config.gen_config)
    rewards = config.rewards(eval_manifest.reward_table_id)
    tlog = TrainingLog()
    if fine_tune_updates and artifact.kind != "random":
        artifact, tlog = train_policy(artifact, interpreter, tasks, rewards, config, seed, algo or config.algo,
                                      fine_tune_updates, cost_source=cost_source, tag="finetune")
    episodes = evaluate(artifact, interpreter, tasks, rewards, config, seed)
    return metrics_by_threshold(episodes, (seed,)), artifact, tlog


def eval_multi(artifact: PolicyArtifact, interpreter, cases: Sequence[ConstraintCase], n_episodes: int,
               config: HarnessConfig, seed: int, map_seeds: Optional[Sequence[int]] = None,
               split: str = "train") -> Dict[str, MetricsReport]:
    """Several constraints at once through merged masks; no fine-tuning.

    Returns one report per spec (its own cost and threshold) plus ``"all"``:
    the summed cost against the smallest threshold.
    """
    if len(cases) < 2:
        raise ValueError("eval_multi needs at least two constraints")
    rng = np.random.default_rng([seed, _stream("multi")])
    if map_seeds is None:
        map_seeds = rng.choice(2**62, size=n_episodes, replace=False)
    gen = config.gen_config
    tasks = [Task(generate_map(int(s), gen), tuple(cases)) for s in map_seeds]
    episodes = evaluate(artifact, interpreter, tasks, config.rewards(split), config, seed, n_episodes)
    out = {"all": compute_metrics(episodes, min(c.spec.h_C for c in cases), (seed,))}
    for k, c in enumerate(cases):
        per = [replace(e, cost=e.spec_costs[k], h_C=float(c.spec.h_C)) for e in episodes]
        out[to_dsl(c.spec)] = compute_metrics(per, c.spec.h_C, (seed,))
    return out


def run_baseline(kind: str, train_manifest: DatasetManifest, config: HarnessConfig, seed: int):
    """Train a baseline on the train split. Returns (artifact, training log)."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "random_walk":
        return new_artifact("random", config), TrainingLog()
    tasks = train_manifest.tasks(config.gen_config)
    rewards = config.rewards("train")
    if kind == "penalized_trpo":
        return train_policy(new_artifact("polco", config), OracleInterpreter(), tasks, rewards, config, seed,
                            "penalized", config.n_updates, cost_source="oracle", tag=kind)
    vocab = BagOfWords([e.text for e in train_manifest.entries]).to_list()
    algo = "trpo" if kind == "cf_trpo" else "pcpo"
    return train_policy(new_artifact("fusion", config, vocab), None, tasks, rewards, config, seed, algo,
                        config.n_updates, cost_source="oracle", tag=kind)


BASELINE_ALGO = {"random_walk": None, "cf_trpo": "trpo", "cf_pcpo": "pcpo", "penalized_trpo": "penalized"}


# ---------------------------------------------------------------- acceptance suites

def _map(fn: Callable, args: Sequence[tuple], workers: int) -> list:
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args)))


def _replication_seed(config: HarnessConfig, train_m, eval_m, interp_params, seed):
    interp = LearnedInterpreter(interp_params)
    rows = []
    _, art, _ = safety_training(train_m, config, seed, interpreter=interp)
    reports, _, _ = eval_transfer(art, interp, eval_m, config.fine_tune_updates, config, seed)
    rows += metric_rows("polco", "eval", seed, reports)
    for kind in ("cf_trpo", "cf_pcpo", "random_walk"):
        art, _ = run_baseline(kind, train_m, config, seed)
        src = "oracle" if kind == "cf_pcpo" else "predicted"
        reports, _, _ = eval_transfer(art, None, eval_m, config.fine_tune_updates, config, seed,
                                      cost_source=src, algo=BASELINE_ALGO[kind])
        rows += metric_rows(kind, "eval", seed, reports)
    return rows


def replication_suite(config: HarnessConfig) -> List[dict]:
    """POLCO against the fusion baselines and the random walk, per seed, on the eval split."""
    train_m, eval_m = gen_dataset(config.seed, config.n_train_maps, config.n_eval_maps, constraint_pool(config))
    params = train_stage1(train_m, config)
    rows = []
    for r in _map(_replication_seed, [(config, train_m, eval_m, params, s) for s in config.seeds], config.workers):
        rows += r
    return rows + median_rows(rows)


def _ablation_seed(config: HarnessConfig, train_m, seed):
    rows = []
    tasks = train_m.tasks(config.gen_config)
    for name, cfg in (("full", config), ("no_mask", replace(config, use_mask=False))):
        _, art, _ = safety_training(train_m, cfg, seed, interpreter=OracleInterpreter())
        episodes = evaluate(art, OracleInterpreter(), tasks, cfg.rewards("train"), cfg, seed)
        rows += metric_rows(name, "train", seed, metrics_by_threshold(episodes, (seed,)))
    return rows


ABLATION_THRESHOLDS = (0,)


def ablation_suite(config: HarnessConfig) -> List[dict]:
    """Full model against the model without the constraint mask, both on true masks and thresholds.

    Both agents train on zero-budget constraints: with mixed budgets the averaged
    cost constraint has slack, so the zero-budget episodes would not be optimised for.
    """
    config = replace(config, pool_thresholds=ABLATION_THRESHOLDS)
    train_m, _ = gen_dataset(config.seed, config.n_train_maps, config.n_eval_maps, constraint_pool(config))
    rows = []
    for r in _map(_ablation_seed, [(config, train_m, s) for s in config.seeds], config.workers):
        rows += r
    return rows + median_rows(rows)

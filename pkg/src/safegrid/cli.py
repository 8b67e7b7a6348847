"""Command-line entry point: ``safegrid <command> [options]``.

Each command reads an optional config file (``--config``), applies ``--set
key=value`` overrides, writes the effective config to ``<out>/config.cfg`` and
puts all of its artifacts under ``<out>``. The default output root comes from
the ``SAFEGRID_OUT`` environment variable, falling back to ``./runs``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import ConfigError, dump_config, load_config, parse_overrides
from .constraints import ConstraintError, default_bank, parse_constraint, render_template, variant_name
from .env import GenConfig
from .harness import (
    BASELINE_ALGO,
    BASELINES,
    DatasetManifest,
    HarnessConfig,
    ManifestError,
    PolicyArtifact,
    _cells_for,
    ablation_suite,
    constraint_pool,
    eval_multi,
    eval_transfer,
    evaluate,
    gen_dataset,
    median_rows,
    metric_rows,
    metrics_by_threshold,
    read_metrics_csv,
    replication_suite,
    run_baseline,
    safety_training,
    stage1_pool,
    train_stage1,
    write_metrics_csv,
)
from .interpreter import (
    CollectConfig,
    ConstraintCase,
    InterpreterParams,
    LearnedInterpreter,
    OracleInterpreter,
    collect_interpreter_data,
    evaluate_interpreter,
)

log = logging.getLogger("safegrid")

OUT_ENV = "SAFEGRID_OUT"


class CliError(RuntimeError):
    pass


def _out_dir(args) -> Path:
    if args.command == "report" and args.out and args.out.endswith(".csv"):
        # `report --out summary.csv` names the table; the directory is its parent
        args.dest, args.out = args.out, str(Path(args.out).parent)
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> HarnessConfig:
    text = None
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    return load_config(text, overrides)


def _need(path: Optional[str], what: str) -> Path:
    if not path:
        raise CliError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _interpreter(spec: Optional[str]):
    if spec == "oracle":
        return OracleInterpreter()
    return LearnedInterpreter(InterpreterParams.load(_need(spec, "interpreter")))


def _policies(policy_dir: Optional[str]) -> List[tuple]:
    d = _need(policy_dir, "policies")
    found = sorted(d.glob("policy_seed*.npz"), key=lambda p: int(p.stem.removeprefix("policy_seed")))
    if not found:
        raise CliError(f"no policy_seed*.npz files in {d}")
    return [(int(p.stem.removeprefix("policy_seed")), PolicyArtifact.load(p)) for p in found]


def _finish(out: Path, rows, extra: Optional[dict] = None) -> None:
    rows = list(rows) + median_rows(rows)
    write_metrics_csv(rows, out / "metrics.csv")
    summary = {"version": __version__, "rows": rows}
    summary.update(extra or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / 'metrics.csv'}")


# ------------------------------------------------------------------------ commands

def cmd_gen_dataset(args, cfg: HarnessConfig, out: Path) -> None:
    n_train = args.train_maps if args.train_maps is not None else cfg.n_train_maps
    n_eval = args.eval_maps if args.eval_maps is not None else cfg.n_eval_maps
    train_m, eval_m = gen_dataset(cfg.seed, n_train, n_eval, constraint_pool(cfg))
    train_m.save(out / "train.jsonl")
    eval_m.save(out / "eval.jsonl")
    print(f"wrote {len(train_m.entries)} train and {len(eval_m.entries)} eval records to {out}")


def cmd_train_interpreter(args, cfg, out) -> None:
    manifest = DatasetManifest.load(_need(args.manifest, "manifest"))
    params = train_stage1(manifest, cfg)
    params.save(out / "interpreter.npz")
    report = {"train_losses": params.train_losses}
    if args.eval_manifest:
        held = DatasetManifest.load(_need(args.eval_manifest, "eval-manifest"))
        gens = tuple(GenConfig(g, cells_per_cost_kind=_cells_for(g, cfg.cells_per_cost_kind)) for g in cfg.interp_grid_sizes)
        data = collect_interpreter_data(CollectConfig(gens, cfg.interp_max_steps), stage1_pool(held),
                                        max(1, cfg.interp_trajectories // 5), cfg.seed + 1)
        report["heldout"] = evaluate_interpreter(LearnedInterpreter(params), data)
    (out / "interpreter_metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'interpreter.npz'}")


def cmd_train(args, cfg, out) -> None:
    manifest = DatasetManifest.load(_need(args.manifest, "manifest"))
    if args.interpreter:
        interp = _interpreter(args.interpreter)
    else:
        params = train_stage1(manifest, cfg)
        params.save(out / "interpreter.npz")
        interp = LearnedInterpreter(params)
    rows = []
    tasks = manifest.tasks(cfg.gen_config)
    for seed in cfg.seeds:
        _, art, tlog = safety_training(manifest, cfg, seed, interpreter=interp)
        art.save(out / f"policy_seed{seed}.npz")
        tlog.write_csv(out / f"log_seed{seed}.csv")
        episodes = evaluate(art, interp, tasks, cfg.rewards(manifest.reward_table_id), cfg, seed)
        rows += metric_rows("polco", manifest.split, seed, metrics_by_threshold(episodes, (seed,)))
    _finish(out, rows)


def cmd_eval_transfer(args, cfg, out) -> None:
    manifest = DatasetManifest.load(_need(args.manifest, "manifest"))
    interp = _interpreter(args.interpreter) if args.interpreter else None
    n_ft = args.fine_tune if args.fine_tune is not None else cfg.fine_tune_updates
    rows = []
    for seed, art in _policies(args.policies):
        if art.kind == "polco" and interp is None:
            raise CliError("a polco policy needs --interpreter")
        reports, tuned, tlog = eval_transfer(art, interp, manifest, n_ft, cfg, seed)
        tuned.save(out / f"policy_seed{seed}.npz")
        tlog.write_csv(out / f"log_seed{seed}.csv")
        rows += metric_rows(args.algo or art.kind, manifest.split, seed, reports)
    _finish(out, rows)


def cmd_eval_multi(args, cfg, out) -> None:
    if not args.constraint or len(args.constraint) < 2:
        raise CliError("eval-multi needs at least two --constraint arguments")
    bank = default_bank()
    cases = []
    for dsl in args.constraint:
        spec = parse_constraint(dsl)
        tid = bank.ids(variant_name(spec), args.split)[0]
        cases.append(ConstraintCase(spec, render_template(spec, tid, bank)))
    interp = _interpreter(args.interpreter)
    rows, per_spec = [], {}
    for seed, art in _policies(args.policies):
        reports = eval_multi(art, interp, cases, cfg.eval_episodes, cfg, seed)
        agg = reports.pop("all")
        rows += metric_rows("polco_multi", args.split, seed, {agg.h_C: agg})
        per_spec[str(seed)] = {k: asdict(v) for k, v in reports.items()}
    _finish(out, rows, {"per_spec": per_spec, "constraints": [c.text.text for c in cases]})


def cmd_baseline(args, cfg, out) -> None:
    manifest = DatasetManifest.load(_need(args.manifest, "manifest"))
    held = DatasetManifest.load(_need(args.eval_manifest, "eval-manifest")) if args.eval_manifest else None
    rows = []
    for seed in cfg.seeds:
        art, tlog = run_baseline(args.kind, manifest, cfg, seed)
        art.save(out / f"policy_seed{seed}.npz")
        tlog.write_csv(out / f"log_seed{seed}.csv")
        interp = OracleInterpreter() if art.kind == "polco" else None
        if held is None:
            episodes = evaluate(art, interp, manifest.tasks(cfg.gen_config), cfg.rewards("train"), cfg, seed)
            rows += metric_rows(args.kind, manifest.split, seed, metrics_by_threshold(episodes, (seed,)))
        else:
            src = "oracle" if args.kind in ("cf_pcpo", "penalized_trpo") else "predicted"
            reports, _, _ = eval_transfer(art, interp, held, cfg.fine_tune_updates, cfg, seed, cost_source=src,
                                          algo=BASELINE_ALGO[args.kind])
            rows += metric_rows(args.kind, held.split, seed, reports)
    _finish(out, rows)


def cmd_suite(args, cfg, out) -> None:
    rows = replication_suite(cfg) if args.name == "replication" else ablation_suite(cfg)
    write_metrics_csv(rows, out / "metrics.csv")
    print(f"wrote {out / 'metrics.csv'}")


def cmd_report(args, cfg, out) -> None:
    src = _need(args.inp, "in")
    rows = []
    for path in sorted(src.rglob("metrics.csv")):
        rows += [r for r in read_metrics_csv(path) if r["seed"] != "median"]
    if not rows:
        raise CliError(f"no metrics.csv files under {src}")
    dest = Path(args.dest) if args.dest else out / "summary.csv"
    if not dest.is_absolute() and dest.parent == Path("."):
        dest = out / dest
    write_metrics_csv(median_rows(rows), dest)
    print(f"wrote {dest}")


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train-interpreter": cmd_train_interpreter,
    "train": cmd_train,
    "eval-transfer": cmd_eval_transfer,
    "eval-multi": cmd_eval_multi,
    "baseline": cmd_baseline,
    "suite": cmd_suite,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value, per-module sections)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="parallel worker processes for per-seed runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safegrid", description="Constraint-conditioned safe RL in a hazard grid world.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-dataset", parents=[common], help="write train/eval manifests")
    s.add_argument("--train-maps", type=int)
    s.add_argument("--eval-maps", type=int)

    s = sub.add_parser("train-interpreter", parents=[common], help="stage 1 only")
    s.add_argument("--manifest", required=True)
    s.add_argument("--eval-manifest", help="also report accuracy on this manifest's phrasings")

    s = sub.add_parser("train", parents=[common], help="stage 1 + stage 2 for every seed")
    s.add_argument("--manifest", required=True)
    s.add_argument("--interpreter", help="interpreter .npz, or 'oracle' for true masks; omitted = train one")

    s = sub.add_parser("eval-transfer", parents=[common], help="fine-tune and evaluate on the eval split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--policies", required=True, help="directory holding policy_seed*.npz")
    s.add_argument("--interpreter")
    s.add_argument("--fine-tune", type=int)
    s.add_argument("--algo", help="label for the metrics rows")

    s = sub.add_parser("eval-multi", parents=[common], help="several constraints at once, merged masks")
    s.add_argument("--policies", required=True)
    s.add_argument("--interpreter", required=True)
    s.add_argument("--constraint", action="append", help="constraint in DSL form; give at least two")
    s.add_argument("--split", choices=("train", "heldout"), default="train", help="template split for the texts")

    s = sub.add_parser("baseline", parents=[common], help="train and evaluate a baseline")
    s.add_argument("--kind", required=True, choices=BASELINES)
    s.add_argument("--manifest", required=True)
    s.add_argument("--eval-manifest")

    s = sub.add_parser("suite", parents=[common], help="run a whole acceptance experiment")
    s.add_argument("--name", required=True, choices=("replication", "ablation"))

    s = sub.add_parser("report", parents=[common], help="merge metrics tables into per-algorithm medians")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out-file", dest="dest", help="summary table path (default <out>/summary.csv)")
    s.epilog = "--out may also name the summary table directly, e.g. --out runs/summary.csv"
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        out = _out_dir(args)
        (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
        COMMANDS[args.command](args, cfg, out)
    except (CliError, ConfigError, ManifestError, ConstraintError, OSError, ValueError, ArithmeticError) as exc:
        print(f"safegrid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``mlal generate | run | report | bench``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mlal.config import ExperimentConfig
from mlal.data import Dataset, ManifestError, generate_synthetic, load_manifest, save_dataset
from mlal.errors import ConfigError
from mlal.harness import (
    SINGLE_METRICS,
    RunRecord,
    aggregate_curves,
    ag_overhead,
    bench_selection,
    curves_csv,
    prepare_trial,
    run_experiment,
)

logger = logging.getLogger("mlal")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "out", None):
        cfg.output.dir = str(args.out)
    if getattr(args, "seed", None) is not None:
        cfg.experiment.seed = args.seed
    if getattr(args, "dataset", None):
        cfg.dataset.manifest = str(args.dataset)
    cfg.validate()
    return cfg


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset.manifest:
        return load_manifest(cfg.dataset.manifest)
    return generate_synthetic(cfg.dataset.synthetic())


def check_dataset(cfg: ExperimentConfig, dataset: Dataset) -> None:
    train_size = len(dataset.indices("train"))
    try:
        cfg.schedule_obj().validate(train_size)
    except ConfigError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    if not len(dataset.indices("eval")):
        raise ConfigError("dataset has no eval samples")
    h, w = dataset.grid_shape[:2]
    try:
        cfg.model.pool().resolve(h * w)
    except ConfigError as exc:
        raise ConfigError(f"model: {exc}") from None


def cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    cfg.coerce()
    try:
        params = cfg.dataset.synthetic()
        params.validate()
    except ConfigError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    out = Path(args.out or cfg.output.dir)
    manifest = save_dataset(generate_synthetic(params), out)
    print(f"wrote {params.n_train + params.n_eval} samples to {manifest}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args)
    dataset = load_dataset(cfg)
    check_dataset(cfg, dataset)
    out = Path(cfg.output.dir)
    records = run_experiment(
        dataset,
        cfg.schedule_obj(),
        cfg.experiment.strategies,
        cfg.model.train_config(),
        cfg.experiment.ag_metrics,
        jobs=args.jobs,
        config_hash=cfg.config_hash(),
    )
    rows = aggregate_curves(records)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    (out / "curves.csv").write_text(curves_csv(rows), encoding="utf-8")
    print(f"wrote {len(records)} runs to {out}")
    print(format_final_table(rows))
    return EXIT_OK


def format_final_table(rows: list[dict]) -> str:
    finals: dict[str, dict] = {}
    for r in rows:
        finals[r["strategy"]] = r
    lines = [f"{'strategy':<10}{'labeled':>8}{'rel. mAP (%)':>14}{'std':>8}"]
    for name, r in finals.items():
        lines.append(
            f"{name:<10}{r['labeled_count']:>8}{r['mean_relative_map']:>14.2f}{r['stddev']:>8.2f}"
        )
    return "\n".join(lines)


def read_run_dir(run_dir: Path) -> tuple[list[dict], list[RunRecord]]:
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    for name in ("curves.csv", "runs.jsonl"):
        if not (run_dir / name).is_file():
            raise FileNotFoundError(f"missing {run_dir / name}")
    with open(run_dir / "curves.csv", newline="", encoding="utf-8") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "strategy": r["strategy"],
                    "iteration": int(r["iteration"]),
                    "labeled_count": int(r["labeled_count"]),
                    "mean_relative_map": float(r["mean_relative_map"]),
                    "stddev": float(r["stddev"]),
                }
            )
    with open(run_dir / "runs.jsonl", encoding="utf-8") as fh:
        records = [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    return rows, records


def vote_distribution(records: list[RunRecord]) -> list[int] | None:
    total = None
    for rec in records:
        for it in rec.iterations:
            if it.vote_histogram is None:
                continue
            h = np.asarray(it.vote_histogram)
            total = h if total is None else total + h
    return None if total is None else [int(x) for x in total]


def format_report(rows: list[dict], records: list[RunRecord]) -> str:
    lines = ["Final relative mAP (% of full-train-set model)", format_final_table(rows), ""]
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    iterations = sorted({(r["iteration"], r["labeled_count"]) for r in rows})
    table = {(r["strategy"], r["iteration"]): r["mean_relative_map"] for r in rows}
    lines.append("Relative mAP per iteration")
    lines.append(f"{'iter':>4}{'labeled':>9}" + "".join(f"{s:>9}" for s in strategies))
    for it, count in iterations:
        cells = "".join(
            f"{table[(s, it)]:>9.2f}" if (s, it) in table else f"{'-':>9}" for s in strategies
        )
        lines.append(f"{it:>4}{count:>9}" + cells)
    hist = vote_distribution(records)
    if hist is not None:
        total = sum(hist)
        lines += ["", f"Vote distribution ({total} candidate samples)"]
        for votes, count in enumerate(hist, start=1):
            share = 100.0 * count / total if total else 0.0
            lines.append(f"{votes:>2} vote(s): {count:>6}  {share:5.1f}%")
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows, records = read_run_dir(Path(args.run_dir))
    if not rows:
        raise ConfigError(f"{args.run_dir}/curves.csv holds no rows")
    print(format_report(rows, records))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    dataset = load_dataset(cfg)
    check_dataset(cfg, dataset)
    schedule = cfg.schedule_obj()
    tcfg = cfg.model.train_config()
    ctx = prepare_trial(dataset, schedule, tcfg, trial=0)
    pool = sorted(set(int(i) for i in dataset.indices("train")) - set(ctx.initial))
    n = min(schedule.adds[0], len(pool)) if schedule.adds else min(1, len(pool))
    strategies = list(SINGLE_METRICS) + ["AG", "R"]
    times = bench_selection(
        strategies, ctx.baseline, dataset, pool, n, args.repeats, cfg.experiment.ag_metrics
    )
    print(f"Selection time, pooling {n} of {len(pool)} samples (best of {args.repeats})")
    for s in strategies:
        print(f"{s + ' (ms)':<14}{1000 * times[s]:>10.3f}")
    print(f"{'delta_AG (%)':<14}{ag_overhead(times):>10.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="experiment TOML file")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="override the seed from the config")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, "dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run an active-learning experiment")
    common(p, "run directory")
    p.add_argument("--dataset", help="manifest file or dataset directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="time one selection pass per strategy")
    common(p, "unused; accepted for symmetry")
    p.add_argument("--dataset", help="manifest file or dataset directory")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

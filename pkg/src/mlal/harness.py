"""Simulated active-learning loop: select, reveal oracle labels, retrain, evaluate.

Within one trial every strategy starts from the same random initial labeled
set, the same parameter initialization and the same baseline model; the
full-train-set reference model is trained once per trial and turns each mAP
into a relative mAP (percent of the reference).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from mlal.aggregate import adversarial_select, metric_agnostic, vote_select
from mlal.data import Dataset
from mlal.errors import ConfigError
from mlal.metrics import DEFAULT_AG_METRICS, MetricId, metric_values, random_ranking, rank_values
from mlal.model import ScorerParams, init_params, mean_average_precision, predict_pool, train
from mlal.scoremap import PoolConfig

logger = logging.getLogger(__name__)

SINGLE_METRICS = ("UNC", "ENT", "MM", "SEPSUM", "SEPMAX", "SEPMIN")
STRATEGIES = SINGLE_METRICS + ("AG", "VOTE", "ADV", "R")
DEFAULT_STRATEGIES = ("UNC", "ENT", "MM", "SEPMAX", "SEPMIN", "SEPSUM", "AG", "R")
CURVE_FIELDS = ("strategy", "iteration", "labeled_count", "mean_relative_map", "stddev")


def epoch_template(n_iterations: int, scale: float = 1.0) -> list[int]:
    """35 epochs for the baseline and early iterations, 25 for the last two, scaled."""
    base = [35] * (n_iterations + 1)
    for i in range(max(1, n_iterations - 1), n_iterations + 1):
        base[i] = 25
    return [max(1, int(round(e * scale))) for e in base]


@dataclass
class Schedule:
    initial_size: int
    adds: list[int]
    epochs: list[int] | None = None
    trials: int = 3
    seed: int = 0
    epoch_scale: float = 1.0

    def __post_init__(self):
        self.adds = [int(a) for a in self.adds]
        if self.epochs is None:
            self.epochs = epoch_template(len(self.adds), self.epoch_scale)
        self.epochs = [int(e) for e in self.epochs]

    def validate(self, train_size: int | None = None) -> None:
        if self.initial_size < 1:
            raise ConfigError(f"initial_size must be >= 1, got {self.initial_size}")
        if any(a < 1 for a in self.adds):
            raise ConfigError(f"per-iteration adds must be positive, got {self.adds}")
        if len(self.epochs) != len(self.adds) + 1:
            raise ConfigError(
                f"epochs needs {len(self.adds) + 1} entries (baseline + iterations), "
                f"got {len(self.epochs)}"
            )
        if any(e < 0 for e in self.epochs):
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if train_size is not None and self.total_labeled > train_size:
            raise ConfigError(
                f"schedule labels {self.total_labeled} samples but the train split has {train_size}"
            )

    @property
    def total_labeled(self) -> int:
        return self.initial_size + sum(self.adds)

    def trial_seed(self, trial: int) -> int:
        return derive_seed(self.seed, "trial", trial)


@dataclass
class TrainConfig:
    pool: PoolConfig = field(default_factory=PoolConfig)
    lr: float = 0.1
    batch_size: int = 16
    init_scale: float = 0.01
    warm_start: bool = False

    def validate(self) -> None:
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_scale < 0:
            raise ConfigError(f"init_scale must be >= 0, got {self.init_scale}")


@dataclass
class PoolState:
    labeled: list[int]
    unlabeled: list[int]
    eval_ids: list[int]
    iteration: int = 0

    def annotate(self, ids) -> None:
        """Move ``ids`` from the unlabeled pool to the labeled set."""
        ids = [int(i) for i in ids]
        chosen = set(ids)
        if len(chosen) != len(ids) or not chosen <= set(self.unlabeled):
            raise ValueError("selection must be distinct ids from the unlabeled pool")
        self.labeled = sorted(set(self.labeled) | chosen)
        self.unlabeled = [i for i in self.unlabeled if i not in chosen]
        self.iteration += 1


@dataclass
class IterationRecord:
    iteration: int
    labeled_count: int
    selected: list[int]
    metric_values: dict
    contributions: dict
    vote_histogram: list[int] | None
    train_seed: int
    epochs: int
    map: float
    relative_map: float
    selection_seconds: float
    warning: str | None = None


@dataclass
class RunRecord:
    strategy: str
    trial: int
    trial_seed: int
    config_hash: str
    reference_map: float
    iterations: list[IterationRecord] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        its = [IterationRecord(**it) for it in d.get("iterations", [])]
        return cls(**{**d, "iterations": its})


def derive_seed(base: int, *keys) -> int:
    """Stable 63-bit seed from a base seed and a tuple of labels."""
    text = json.dumps([int(base), *[str(k) for k in keys]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass
class TrialContext:
    """Everything strategies in one trial share."""

    trial: int
    trial_seed: int
    initial: list[int]
    init: ScorerParams
    baseline: ScorerParams
    baseline_map: float
    reference_map: float


def _eval_map(params: ScorerParams, dataset: Dataset) -> float:
    ev = dataset.indices("eval")
    pred = predict_pool(params, dataset.features, ev)
    value, _ = mean_average_precision(pred.confidences, dataset.labels[ev], ev)
    return value


def _fit(dataset, ids, start, epochs, seed, tcfg: TrainConfig) -> ScorerParams:
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    return train(
        start, dataset.features[ids], dataset.labels[ids], epochs, tcfg.lr, seed, tcfg.batch_size
    )


def prepare_trial(dataset: Dataset, schedule: Schedule, tcfg: TrainConfig, trial: int) -> TrialContext:
    train_ids = dataset.indices("train")
    seed = schedule.trial_seed(trial)
    rng = np.random.default_rng(derive_seed(seed, "initial"))
    initial = sorted(int(i) for i in rng.choice(train_ids, schedule.initial_size, replace=False))
    _, h, w, d = dataset.features.shape
    init = init_params(
        dataset.n_classes, d, tcfg.pool, derive_seed(seed, "init"), tcfg.init_scale
    )
    tcfg.pool.resolve(h * w)
    reference = _fit(dataset, train_ids, init, schedule.epochs[0], derive_seed(seed, "reference"), tcfg)
    baseline = _fit(dataset, initial, init, schedule.epochs[0], derive_seed(seed, "train", 0), tcfg)
    return TrialContext(
        trial, seed, initial, init, baseline, _eval_map(baseline, dataset), _eval_map(reference, dataset)
    )


def select(
    strategy: str,
    params: ScorerParams | None,
    dataset: Dataset,
    pool_ids,
    n: int,
    seed: int,
    ag_metrics=DEFAULT_AG_METRICS,
):
    """One selection pass over the unlabeled pool.

    The pool is scored once; every metric a strategy needs reads the same
    predictions. Only ``ADV`` looks at oracle labels.
    Returns ``(selected ids, per-metric values of the selected ids, SelectionResult | None)``.
    """
    pool_ids = np.asarray(sorted(int(i) for i in pool_ids), dtype=np.int64)
    if strategy == "R":
        ranking = random_ranking(pool_ids, seed)
        return list(ranking.sample_ids[:n]), {}, None
    if strategy == "ADV":
        counts = {int(i): int(dataset.labels[i].sum()) for i in pool_ids}
        result = adversarial_select(counts, n)
        return result.selected, {"label_count": [counts[i] for i in result.selected]}, result
    if strategy in SINGLE_METRICS:
        metrics = [MetricId(strategy)]
    elif strategy in ("AG", "VOTE"):
        metrics = [MetricId(m) for m in ag_metrics]
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    pred = predict_pool(params, dataset.features, pool_ids)
    values = {m: metric_values(pred, m) for m in metrics}
    rankings = [rank_values(values[m], pool_ids, m) for m in metrics]
    if strategy == "AG":
        result = metric_agnostic(rankings, n)
    elif strategy == "VOTE":
        result = vote_select(rankings, n)
    else:
        result = None
    selected = list(rankings[0].sample_ids[:n]) if result is None else [int(i) for i in result.selected]
    row = {int(i): k for k, i in enumerate(pool_ids)}
    picked = [row[i] for i in selected]
    metric_record = {m.value: [float(values[m][k]) for k in picked] for m in metrics}
    return selected, metric_record, result


def run_trial(
    dataset: Dataset,
    schedule: Schedule,
    strategy: str,
    trial: int = 0,
    tcfg: TrainConfig | None = None,
    context: TrialContext | None = None,
    ag_metrics=DEFAULT_AG_METRICS,
    config_hash: str = "",
) -> RunRecord:
    tcfg = tcfg or TrainConfig()
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    schedule.validate(len(dataset.indices("train")))
    ctx = context or prepare_trial(dataset, schedule, tcfg, trial)
    state = PoolState(
        labeled=list(ctx.initial),
        unlabeled=sorted(set(int(i) for i in dataset.indices("train")) - set(ctx.initial)),
        eval_ids=[int(i) for i in dataset.indices("eval")],
    )
    record = RunRecord(strategy, trial, ctx.trial_seed, config_hash, ctx.reference_map)
    record.iterations.append(
        IterationRecord(
            0, len(state.labeled), [], {}, {}, None, derive_seed(ctx.trial_seed, "train", 0),
            schedule.epochs[0], ctx.baseline_map, 100.0 * ctx.baseline_map / ctx.reference_map, 0.0,
        )
    )
    params = ctx.baseline
    for it, budget in enumerate(schedule.adds, start=1):
        warning = None
        n = budget
        if budget > len(state.unlabeled):
            n = len(state.unlabeled)
            warning = f"budget {budget} exceeds pool of {n}; selection truncated"
            logger.warning(warning)
        started = time.perf_counter()
        if n:
            selected, values, result = select(
                strategy, params, dataset, state.unlabeled, n,
                derive_seed(ctx.trial_seed, "random", it), ag_metrics,
            )
        else:
            selected, values, result = [], {}, None
        elapsed = time.perf_counter() - started
        state.annotate(selected)
        seed = derive_seed(ctx.trial_seed, "train", it)
        start = params if tcfg.warm_start else ctx.init
        params = _fit(dataset, state.labeled, start, schedule.epochs[it], seed, tcfg)
        value = _eval_map(params, dataset)
        record.iterations.append(
            IterationRecord(
                iteration=it,
                labeled_count=len(state.labeled),
                selected=selected,
                metric_values=values,
                contributions=dict(result.contributions) if result else {},
                vote_histogram=result.vote_histogram if result else None,
                train_seed=seed,
                epochs=schedule.epochs[it],
                map=value,
                relative_map=100.0 * value / ctx.reference_map,
                selection_seconds=elapsed,
                warning=warning,
            )
        )
    return record


# Worker-process state; set once per worker by the pool initializer.
_WORKER: dict = {}


def _init_worker(dataset, schedule, tcfg, ag_metrics, config_hash):
    _WORKER.update(
        dataset=dataset, schedule=schedule, tcfg=tcfg, ag_metrics=ag_metrics, config_hash=config_hash
    )


def _worker_context(trial):
    w = _WORKER
    return prepare_trial(w["dataset"], w["schedule"], w["tcfg"], trial)


def _worker_trial(args):
    strategy, ctx = args
    w = _WORKER
    return run_trial(
        w["dataset"], w["schedule"], strategy, ctx.trial, w["tcfg"], ctx, w["ag_metrics"], w["config_hash"]
    )


def run_experiment(
    dataset: Dataset,
    schedule: Schedule,
    strategies,
    tcfg: TrainConfig | None = None,
    ag_metrics=DEFAULT_AG_METRICS,
    jobs: int = 1,
    config_hash: str = "",
) -> list[RunRecord]:
    """Run every (strategy, trial) pair; records come back in (trial, strategy) order."""
    tcfg = tcfg or TrainConfig()
    tcfg.validate()
    schedule.validate(len(dataset.indices("train")))
    strategies = list(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    ag_metrics = tuple(MetricId(m) for m in ag_metrics)
    init_args = (dataset, schedule, tcfg, ag_metrics, config_hash)
    trials = range(schedule.trials)
    if jobs <= 1:
        _init_worker(*init_args)
        try:
            contexts = [_worker_context(t) for t in trials]
            return [_worker_trial((s, ctx)) for ctx in contexts for s in strategies]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init_args) as ex:
        contexts = list(ex.map(_worker_context, trials))
        return list(ex.map(_worker_trial, [(s, ctx) for ctx in contexts for s in strategies]))


def aggregate_curves(records: list[RunRecord]) -> list[dict]:
    """Mean and standard deviation (ddof=1; 0 for a single trial) of relative mAP per iteration."""
    grouped: dict = {}
    order: list[str] = []
    for rec in records:
        if rec.strategy not in grouped:
            grouped[rec.strategy] = {}
            order.append(rec.strategy)
        for it in rec.iterations:
            grouped[rec.strategy].setdefault((it.iteration, it.labeled_count), []).append(it.relative_map)
    rows = []
    for strategy in order:
        for (iteration, count), values in sorted(grouped[strategy].items()):
            v = np.asarray(values)
            rows.append(
                {
                    "strategy": strategy,
                    "iteration": iteration,
                    "labeled_count": count,
                    "mean_relative_map": float(v.mean()),
                    "stddev": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                }
            )
    return rows


def curves_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_FIELDS)
    for r in rows:
        writer.writerow(
            [r["strategy"], r["iteration"], r["labeled_count"],
             f"{r['mean_relative_map']:.6f}", f"{r['stddev']:.6f}"]
        )
    return buf.getvalue()


def final_relative_map(rows: list[dict]) -> dict[str, float]:
    out = {}
    for r in rows:
        out[r["strategy"]] = r["mean_relative_map"]  # rows are sorted by iteration per strategy
    return out


def time_selection(
    strategy: str,
    params: ScorerParams,
    dataset: Dataset,
    pool_ids,
    n: int,
    repeats: int = 1,
    seed: int = 0,
    ag_metrics=DEFAULT_AG_METRICS,
) -> float:
    """Wall-clock seconds of one selection pass, scoring included (best of ``repeats``).

    ``R`` never runs the model, so its time excludes scoring.
    """
    best = float("inf")
    for _ in range(max(1, repeats)):
        started = time.perf_counter()
        select(strategy, params, dataset, pool_ids, n, seed, ag_metrics)
        best = min(best, time.perf_counter() - started)
    return best


def ag_overhead(times: dict[str, float]) -> float:
    """Relative (%) difference between AG and the mean of the single metrics."""
    singles = [times[m] for m in SINGLE_METRICS if m in times]
    if not singles or "AG" not in times:
        raise ConfigError("need AG and at least one single metric timing")
    mean = float(np.mean(singles))
    return 100.0 * (times["AG"] - mean) / mean


def bench_selection(
    strategies,
    params: ScorerParams,
    dataset: Dataset,
    pool_ids,
    n: int,
    repeats: int = 5,
    ag_metrics=DEFAULT_AG_METRICS,
) -> dict[str, float]:
    """Best-of-``repeats`` selection time per strategy, repeats interleaved across strategies."""
    times = {s: float("inf") for s in strategies}
    for r in range(max(1, repeats)):
        for s in strategies:
            times[s] = min(times[s], time_selection(s, params, dataset, pool_ids, n, 1, r, ag_metrics))
    return times

"""Query metrics over model predictions and the rankings they induce.

Every metric reduces the class axis (last axis) of a :class:`Prediction`, so
the same call scores one sample or a whole pool. Rankings are best-first and
break ties by ascending sample id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from mlal.errors import ConfigError, UnsupportedMetricError
from mlal.model import EPS, Prediction


class MetricId(str, enum.Enum):
    UNC = "UNC"
    ENT = "ENT"
    MM = "MM"
    SEPSUM = "SEPSUM"
    SEPMAX = "SEPMAX"
    SEPMIN = "SEPMIN"
    RANDOM = "RANDOM"


class Direction(str, enum.Enum):
    SELECT_MIN = "min"
    SELECT_MAX = "max"


DIRECTION = {
    MetricId.UNC: Direction.SELECT_MIN,
    MetricId.ENT: Direction.SELECT_MAX,
    MetricId.MM: Direction.SELECT_MIN,
    MetricId.SEPSUM: Direction.SELECT_MIN,
    MetricId.SEPMAX: Direction.SELECT_MIN,
    MetricId.SEPMIN: Direction.SELECT_MIN,
}

# Caption order of the vote-distribution figures; also the round-robin turn order.
DEFAULT_AG_METRICS = (
    MetricId.UNC,
    MetricId.ENT,
    MetricId.MM,
    MetricId.SEPMAX,
    MetricId.SEPMIN,
    MetricId.SEPSUM,
)


@dataclass(frozen=True)
class Ranking:
    metric_id: MetricId
    sample_ids: tuple[int, ...]
    tie_policy: str = "ascending sample id"

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self):
        return iter(self.sample_ids)


def _confidences(pred) -> np.ndarray:
    p = pred.confidences if isinstance(pred, Prediction) else pred
    return np.asarray(p, dtype=np.float64)


def unc(pred) -> np.ndarray | float:
    """Summed distance of each class confidence from 0.5 (lower is more uncertain)."""
    value = np.abs(_confidences(pred) - 0.5).sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def ent(pred, binary: bool = False) -> np.ndarray | float:
    """``-sum_j p_j ln p_j`` over the sigmoid confidences.

    With ``binary=True`` each class contributes its Bernoulli entropy
    ``-p ln p - (1-p) ln(1-p)`` instead.
    """
    p = np.clip(_confidences(pred), EPS, 1 - EPS)
    terms = -p * np.log(p)
    if binary:
        terms = terms - (1 - p) * np.log1p(-p)
    value = terms.sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def mm(pred) -> np.ndarray | float:
    value = _confidences(pred).max(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


_SEP_REDUCE = {"sum": np.sum, "max": np.max, "min": np.min}


def sep(pred: Prediction, agg: str = "sum") -> np.ndarray | float:
    """Aggregate the per-class foreground/background separations (``sum``, ``max`` or ``min``)."""
    separations = getattr(pred, "separations", None)
    if separations is None:
        raise UnsupportedMetricError("prediction carries no separation values")
    try:
        reduce = _SEP_REDUCE[agg.lower()]
    except KeyError:
        raise ConfigError(f"unknown separation aggregate {agg!r}") from None
    value = reduce(np.asarray(separations, dtype=np.float64), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def metric_values(pred: Prediction, metric_id) -> np.ndarray:
    """Per-sample values of ``metric_id`` for a batch prediction."""
    metric_id = MetricId(metric_id)
    if metric_id is MetricId.UNC:
        return np.atleast_1d(unc(pred))
    if metric_id is MetricId.ENT:
        return np.atleast_1d(ent(pred))
    if metric_id is MetricId.MM:
        return np.atleast_1d(mm(pred))
    if metric_id is MetricId.RANDOM:
        raise ConfigError("RANDOM has no per-sample value")
    return np.atleast_1d(sep(pred, metric_id.value[3:]))


def rank_values(values, sample_ids, metric_id) -> Ranking:
    """Sort samples best-first by a precomputed metric value."""
    metric_id = MetricId(metric_id)
    values = np.asarray(values, dtype=np.float64)
    ids = np.asarray(sample_ids, dtype=np.int64)
    if values.shape != ids.shape:
        raise ConfigError(f"{values.shape} values for {ids.shape} sample ids")
    key = values if DIRECTION[metric_id] is Direction.SELECT_MIN else -values
    order = np.lexsort((ids, key))
    return Ranking(metric_id, tuple(int(i) for i in ids[order]))


def rank(pred: Prediction, metric_id, seed: int | None = None) -> Ranking:
    """Rank the pool rows of ``pred`` by one metric.

    ``RANDOM`` ignores the predictions and returns a seeded uniform
    permutation of the pool ids (sorted first, so row order does not matter).
    """
    metric_id = MetricId(metric_id)
    if pred.sample_ids is None:
        raise ConfigError("ranking needs a prediction with sample_ids")
    ids = np.asarray(pred.sample_ids, dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ConfigError("duplicate sample ids in the pool")
    if len(ids) == 0:
        return Ranking(metric_id, ())
    if metric_id is MetricId.RANDOM:
        return random_ranking(ids, seed)
    return rank_values(metric_values(pred, metric_id), ids, metric_id)


def random_ranking(sample_ids, seed: int | None) -> Ranking:
    ids = np.sort(np.asarray(sample_ids, dtype=np.int64))
    perm = np.random.default_rng(seed).permutation(len(ids))
    return Ranking(MetricId.RANDOM, tuple(int(i) for i in ids[perm]), "seeded permutation")

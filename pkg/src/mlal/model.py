"""Per-cell linear multi-label scorer trained through spatial pooling.

A feature grid ``(H, W, D)`` is mapped cell by cell to ``C*M`` raw scores,
class-wise pooled (Wildcat) into ``C`` class maps, spatially pooled into one
logit per class and squashed with a sigmoid. Training is plain mini-batch SGD
on the per-class binary cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from mlal.errors import ConfigError, UsageError
from mlal.scoremap import PoolConfig, PoolMode, pool_backward, spatial_pool

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class ScorerParams:
    weight: np.ndarray  # (C*M, D)
    bias: np.ndarray  # (C*M,)
    pool: PoolConfig

    def __post_init__(self):
        m = self.pool.maps_per_class
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        if self.weight.shape[0] % m:
            raise ConfigError(f"{self.weight.shape[0]} score maps not divisible by M={m}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ConfigError("scorer parameters must be finite")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0] // self.pool.maps_per_class

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "ScorerParams":
        return replace(self, weight=self.weight.copy(), bias=self.bias.copy())


@dataclass
class Prediction:
    """Sigmoid confidences, separations and raw pooled scores, each ``(..., C)``.

    A batch prediction carries the integer ``sample_ids`` of its rows.
    """

    confidences: np.ndarray
    separations: np.ndarray | None
    scores: np.ndarray
    sample_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return 1 if self.confidences.ndim == 1 else self.confidences.shape[0]


def init_params(
    n_classes: int, dim: int, pool: PoolConfig, seed: int, scale: float = 0.01
) -> ScorerParams:
    if n_classes < 1 or dim < 1:
        raise ConfigError(f"need n_classes >= 1 and dim >= 1, got {n_classes}, {dim}")
    rng = np.random.default_rng(seed)
    rows = n_classes * pool.maps_per_class
    return ScorerParams(rng.normal(0.0, scale, size=(rows, dim)), np.zeros(rows), pool)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_grid(params: ScorerParams, x: np.ndarray) -> None:
    if x.ndim < 3 or x.shape[-1] != params.dim:
        raise ConfigError(
            f"feature grid of shape {x.shape} does not match scorer dim {params.dim}"
        )


def _forward(params: ScorerParams, x: np.ndarray):
    """Batched forward; ``x`` is ``(N, H, W, D)``. Returns the prediction and pooling state."""
    _check_grid(params, x)
    n, h, w, _ = x.shape
    cells = x.reshape(n, h * w, -1) @ params.weight.T + params.bias  # (N, HW, C*M)
    m = params.pool.maps_per_class
    if params.pool.mode is PoolMode.WILDCAT:
        cells = cells.reshape(n, h * w, params.n_classes, m).mean(axis=-1)
    class_maps = cells.transpose(0, 2, 1).reshape(n, params.n_classes, h, w)
    summary = spatial_pool(class_maps, params.pool)
    scores = summary.class_score
    pred = Prediction(sigmoid(scores), summary.separation, scores)
    return pred, summary


def forward(params: ScorerParams, x) -> Prediction:
    """Predict one grid ``(H, W, D)`` or a batch ``(N, H, W, D)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        pred, _ = _forward(params, x[None])
        return Prediction(pred.confidences[0], pred.separations[0], pred.scores[0])
    pred, _ = _forward(params, x)
    return pred


def predict_pool(params: ScorerParams, features: np.ndarray, ids, chunk: int = 512) -> Prediction:
    """Score ``features[ids]`` in chunks; row order follows ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    parts = [forward(params, features[ids[i : i + chunk]]) for i in range(0, len(ids), chunk)]
    if not parts:
        c = params.n_classes
        empty = np.zeros((0, c))
        return Prediction(empty, empty.copy(), empty.copy(), ids)
    return Prediction(
        np.concatenate([p.confidences for p in parts]),
        np.concatenate([p.separations for p in parts]),
        np.concatenate([p.scores for p in parts]),
        ids,
    )


def loss(pred: Prediction, labels) -> float:
    """Mean over classes (and samples) of the clamped binary cross-entropy."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != pred.confidences.shape:
        raise ConfigError(f"labels {y.shape} do not match predictions {pred.confidences.shape}")
    p = np.clip(pred.confidences, EPS, 1 - EPS)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def loss_and_grad(params: ScorerParams, x, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch loss and its gradient with respect to ``weight`` and ``bias``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    pred, summary = _forward(params, x)
    n, h, w, d = x.shape
    c = params.n_classes
    value = loss(pred, y)
    p = pred.confidences
    # The clamp is flat outside [EPS, 1-EPS], so saturated classes pass no gradient.
    active = (p > EPS) & (p < 1 - EPS)
    d_score = np.where(active, p - y, 0.0) / (n * c)
    d_maps = pool_backward(summary, d_score).reshape(n, c, h * w)
    d_cells = d_maps.transpose(0, 2, 1)  # (N, HW, C)
    m = params.pool.maps_per_class
    if params.pool.mode is PoolMode.WILDCAT:
        d_cells = np.repeat(d_cells / m, m, axis=-1)
    flat_x = x.reshape(n, h * w, d)
    grad_w = np.einsum("nck,ncd->kd", d_cells, flat_x)
    grad_b = d_cells.sum(axis=(0, 1))
    return value, grad_w, grad_b


def train(
    params: ScorerParams,
    features,
    labels,
    epochs: int,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 16,
) -> ScorerParams:
    """Mini-batch SGD on a private copy of ``params``.

    Samples are visited in a fresh seeded permutation every epoch, so the
    result is a pure function of the inputs, their order and ``seed``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(x) == 0:
        raise UsageError("cannot train on an empty labeled set")
    if len(x) != len(y):
        raise ConfigError(f"{len(x)} feature grids but {len(y)} label rows")
    if batch_size < 1 or epochs < 0:
        raise ConfigError(f"invalid batch_size={batch_size} or epochs={epochs}")
    out = params.copy()
    weight, bias = out.weight, out.bias
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            _, gw, gb = loss_and_grad(out, x[idx], y[idx])
            weight -= lr * gw
            bias -= lr * gb
    return out


def average_precision(scores, labels, sample_ids=None) -> float:
    """Precision at each positive hit, averaged over the positives.

    Ranking is by descending score with ties broken by ascending sample id.
    Returns NaN when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    ids = np.arange(len(scores)) if sample_ids is None else np.asarray(sample_ids)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.lexsort((ids, -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return math.fsum((np.arange(1, n_pos + 1) / ranks).tolist()) / n_pos


def mean_average_precision(scores, labels, sample_ids=None) -> tuple[float, list[int]]:
    """mAP over the classes that have at least one positive, plus the excluded classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ConfigError(f"scores {scores.shape} and labels {labels.shape} must be (N, C)")
    if scores.shape[0] == 0:
        raise UsageError("cannot evaluate mAP on an empty set")
    aps, excluded = [], []
    for j in range(scores.shape[1]):
        ap = average_precision(scores[:, j], labels[:, j], sample_ids)
        if np.isnan(ap):
            excluded.append(j)
        else:
            aps.append(ap)
    if not aps:
        raise UsageError("no class has a positive sample in the evaluation set")
    return math.fsum(aps) / len(aps), excluded


def evaluate_map(params: ScorerParams, features, labels, sample_ids=None) -> float:
    pred = forward(params, np.asarray(features, dtype=np.float64))
    value, excluded = mean_average_precision(pred.confidences, labels, sample_ids)
    if excluded:
        logger.warning("classes %s have no positives and were left out of mAP", excluded)
    return value

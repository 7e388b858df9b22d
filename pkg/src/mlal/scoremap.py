"""Class score maps and the two top/bottom spatial pooling schemes.

Weldon pooling averages the mean of the ``k_top`` highest cells with the mean
of the ``k_bot`` lowest cells. Wildcat first averages ``M`` maps per class
(class-wise pooling) and then adds the top-cell mean to ``alpha`` times the
bottom-cell mean.

Every function here works on a single ``H x W`` map as well as on batches
shaped ``(..., H, W)``. Order statistics are tie-broken by lowest row-major
cell index, for both the largest and the smallest selections.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from mlal.errors import ConfigError, UsageError


class PoolMode(str, enum.Enum):
    WELDON = "weldon"
    WILDCAT = "wildcat"


class SeparationKind(str, enum.Enum):
    EXTREME = "extreme"  # max cell - min cell
    MEAN = "mean"  # mean of top cells - mean of bottom cells


def default_k(n_cells: int) -> int:
    return max(1, int(round(0.1 * n_cells)))


@dataclass(frozen=True)
class PoolConfig:
    """Pooling hyperparameters.

    ``k_top``/``k_bot`` left as ``None`` resolve to ``max(1, round(0.1 * H * W))``
    once the grid size is known.
    """

    mode: PoolMode = PoolMode.WELDON
    k_top: int | None = None
    k_bot: int | None = None
    alpha: float = 1.0
    maps_per_class: int = 1
    separation: SeparationKind = SeparationKind.EXTREME

    def __post_init__(self):
        object.__setattr__(self, "mode", PoolMode(self.mode))
        object.__setattr__(self, "separation", SeparationKind(self.separation))
        for name in ("k_top", "k_bot"):
            k = getattr(self, name)
            if k is not None and (int(k) != k or k < 1):
                raise ConfigError(f"{name} must be a positive integer, got {k!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.maps_per_class) != self.maps_per_class or self.maps_per_class < 1:
            raise ConfigError(f"maps_per_class must be >= 1, got {self.maps_per_class}")
        if self.mode is PoolMode.WELDON and self.maps_per_class != 1:
            raise ConfigError("maps_per_class > 1 requires wildcat mode")

    def resolve(self, n_cells: int) -> tuple[int, int]:
        """Concrete ``(k_top, k_bot)`` for a grid with ``n_cells`` cells."""
        k_top = self.k_top if self.k_top is not None else default_k(n_cells)
        k_bot = self.k_bot if self.k_bot is not None else default_k(n_cells)
        if k_top > n_cells or k_bot > n_cells:
            raise ConfigError(
                f"k_top={k_top}, k_bot={k_bot} exceed the {n_cells} cells of the map"
            )
        return int(k_top), int(k_bot)

    @property
    def top_weight(self) -> float:
        return 0.5 if self.mode is PoolMode.WELDON else 1.0

    @property
    def bottom_weight(self) -> float:
        return 0.5 if self.mode is PoolMode.WELDON else self.alpha


@dataclass
class ClassSummary:
    """Pooled score and foreground/background separation of one or more class maps.

    ``top_idx``/``bottom_idx`` hold the flat cell indices chosen by the forward
    pass; :func:`pool_backward` routes gradients through exactly these cells.
    """

    class_score: np.ndarray | float
    separation: np.ndarray | float
    top_idx: np.ndarray | None = field(default=None, repr=False)
    bottom_idx: np.ndarray | None = field(default=None, repr=False)
    map_shape: tuple[int, int] | None = None
    cfg: PoolConfig | None = field(default=None, repr=False)


def _as_maps(values) -> np.ndarray:
    maps = np.asarray(values, dtype=np.float64)
    if maps.ndim < 2:
        raise ConfigError(f"score map must have at least 2 dims (H, W), got shape {maps.shape}")
    if maps.shape[-1] < 1 or maps.shape[-2] < 1:
        raise ConfigError(f"empty score map of shape {maps.shape}")
    return maps


def order_statistics(flat: np.ndarray, k_top: int, k_bot: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k_top`` largest and ``k_bot`` smallest cells along the last axis."""
    top = np.argsort(-flat, axis=-1, kind="stable")[..., :k_top]
    bottom = np.argsort(flat, axis=-1, kind="stable")[..., :k_bot]
    return top, bottom


def _spatial_pool(maps, cfg: PoolConfig, expected: PoolMode) -> ClassSummary:
    if cfg.mode is not expected:
        raise ConfigError(f"{expected.value} pooling called with mode={cfg.mode.value}")
    maps = _as_maps(maps)
    h, w = maps.shape[-2:]
    k_top, k_bot = cfg.resolve(h * w)
    flat = maps.reshape(maps.shape[:-2] + (h * w,))
    top, bottom = order_statistics(flat, k_top, k_bot)
    top_mean = np.take_along_axis(flat, top, axis=-1).sum(axis=-1) / k_top
    bottom_mean = np.take_along_axis(flat, bottom, axis=-1).sum(axis=-1) / k_bot
    if cfg.mode is PoolMode.WELDON:
        score = (top_mean + bottom_mean) / 2
    else:
        score = top_mean + cfg.alpha * bottom_mean
    if cfg.separation is SeparationKind.EXTREME:
        sep = flat.max(axis=-1) - flat.min(axis=-1)
    else:
        sep = top_mean - bottom_mean
    if score.ndim == 0:
        score, sep = float(score), float(sep)
    return ClassSummary(score, sep, top, bottom, (h, w), cfg)


def weldon_pool(maps, cfg: PoolConfig) -> ClassSummary:
    """``(mean of k_top largest + mean of k_bot smallest) / 2`` per map."""
    return _spatial_pool(maps, cfg, PoolMode.WELDON)


def wildcat_spatial_pool(maps, cfg: PoolConfig) -> ClassSummary:
    """``mean of k_top largest + alpha * mean of k_bot smallest`` per map."""
    return _spatial_pool(maps, cfg, PoolMode.WILDCAT)


def spatial_pool(maps, cfg: PoolConfig) -> ClassSummary:
    return _spatial_pool(maps, cfg, cfg.mode)


def wildcat_class_pool(raw, maps_per_class: int) -> np.ndarray:
    """Average each consecutive block of ``maps_per_class`` maps into one class map.

    ``raw`` has shape ``(..., C*M, H, W)``; rows ``j*M .. j*M + M - 1`` belong to
    class ``j``. Returns ``(..., C, H, W)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim < 3:
        raise ConfigError(f"expected (C*M, H, W) maps, got shape {raw.shape}")
    if maps_per_class < 1 or raw.shape[-3] % maps_per_class:
        raise ConfigError(
            f"{raw.shape[-3]} maps cannot be split into groups of {maps_per_class}"
        )
    n_classes = raw.shape[-3] // maps_per_class
    grouped = raw.reshape(raw.shape[:-3] + (n_classes, maps_per_class) + raw.shape[-2:])
    return grouped.mean(axis=-3)


def pool_backward(summary: ClassSummary, upstream_grad) -> np.ndarray:
    """Gradient of the pooled class score with respect to the map cells.

    ``upstream_grad`` is d(loss)/d(class_score) and broadcasts against the
    batch shape of the forward pass. Top cells receive ``top_weight / k_top``
    of it, bottom cells ``bottom_weight / k_bot``; a cell chosen by both sets
    accumulates both shares.
    """
    if summary.top_idx is None or summary.bottom_idx is None or summary.cfg is None:
        raise UsageError("pool_backward needs the ClassSummary of a forward pass")
    cfg = summary.cfg
    h, w = summary.map_shape
    top, bottom = summary.top_idx, summary.bottom_idx
    g = np.broadcast_to(np.asarray(upstream_grad, dtype=np.float64), top.shape[:-1])[..., None]
    grad = np.zeros(top.shape[:-1] + (h * w,))
    k_top, k_bot = top.shape[-1], bottom.shape[-1]
    np.put_along_axis(grad, top, np.broadcast_to(g * (cfg.top_weight / k_top), top.shape), axis=-1)
    bottom_part = np.zeros_like(grad)
    np.put_along_axis(
        bottom_part, bottom, np.broadcast_to(g * (cfg.bottom_weight / k_bot), bottom.shape), axis=-1
    )
    grad += bottom_part
    return grad.reshape(top.shape[:-1] + (h, w))

"""Composing several metric rankings into one selection.

* :func:`metric_agnostic` - round-robin over the rankings, one head sample per
  metric per turn, skipping samples already taken.
* :func:`vote_select` - count how many metrics put a sample in their top-n.
* :func:`adversarial_select` - most labelled classes first (uses oracle labels).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

from mlal.errors import UsageError
from mlal.metrics import Ranking


@dataclass
class SelectionResult:
    selected: list
    contributions: dict = field(default_factory=dict)
    vote_histogram: list[int] | None = None  # entry v-1 = number of samples with v votes


def _label(ranking, position: int):
    if isinstance(ranking, Ranking):
        return ranking.metric_id.value
    return position


def _ids(ranking) -> Sequence[Hashable]:
    return ranking.sample_ids if isinstance(ranking, Ranking) else list(ranking)


def metric_agnostic(rankings: Sequence, n: int) -> SelectionResult:
    """Round-robin union of best-first rankings, stopping at ``n`` samples.

    Each ranking keeps a cursor that advances on every turn, even when the
    sample under it was already chosen through another metric. Exhausted
    rankings are skipped; if all are exhausted first, the result is short.
    """
    if n < 1:
        raise UsageError(f"number of samples to select must be >= 1, got {n}")
    lists = [_ids(r) for r in rankings]
    labels = [_label(r, t) for t, r in enumerate(rankings)]
    chosen: dict = {}  # insertion-ordered set
    contributions = Counter({label: 0 for label in labels})
    cursors = [0] * len(lists)
    while len(chosen) < n and any(c < len(s) for c, s in zip(cursors, lists)):
        for t, items in enumerate(lists):
            if cursors[t] < len(items):
                sample = items[cursors[t]]
                if sample not in chosen:
                    chosen[sample] = None
                    contributions[labels[t]] += 1
                cursors[t] += 1
            if len(chosen) >= n:
                break
    return SelectionResult(list(chosen), dict(contributions))


def vote_select(rankings: Sequence, n: int) -> SelectionResult:
    """Select by the number of metrics whose top-``n`` contains each sample.

    Ties go to the lower sample id. The histogram covers every candidate in
    the union of the top-``n`` sets.
    """
    if n < 1:
        raise UsageError(f"number of samples to select must be >= 1, got {n}")
    lists = [list(_ids(r))[:n] for r in rankings]
    votes = Counter()
    first_metric = {}
    for t, items in enumerate(lists):
        for sample in dict.fromkeys(items):
            votes[sample] += 1
            first_metric.setdefault(sample, _label(rankings[t], t))
    ordered = sorted(votes, key=lambda s: (-votes[s], s))
    selected = ordered[:n]
    histogram = [0] * len(lists)
    for count in votes.values():
        histogram[count - 1] += 1
    contributions = Counter(first_metric[s] for s in selected)
    return SelectionResult(selected, dict(contributions), histogram)


def adversarial_select(label_counts: Mapping, n: int) -> SelectionResult:
    """The ``n`` samples with the most positive labels, ties by ascending id."""
    if n < 1:
        raise UsageError(f"number of samples to select must be >= 1, got {n}")
    ordered = sorted(label_counts, key=lambda s: (-label_counts[s], s))
    return SelectionResult(ordered[:n], {"ADV": min(n, len(ordered))})

"""Decision-level fusion of prediction tables.

Member models are combined at the decision level only: weighted probability
averaging or plurality voting over each model's argmax.  Vote results are
represented as one-hot distributions so both methods feed the same
evaluation path.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .classifiers import PredictionTable

WEIGHT_SUM_TOL = 1e-9

METHOD_WEIGHTED_AVERAGE = "weighted_average"
METHOD_VOTE = "vote"
FUSION_METHODS = (METHOD_WEIGHTED_AVERAGE, METHOD_VOTE)


@dataclass(frozen=True)
class FusionSpec:
    """How to combine member tables.

    ``weights`` applies to ``weighted_average`` only and must be a convex
    combination (non-negative, summing to 1 within 1e-9) over
    ``member_names``; voting takes no weights.
    """

    method: str
    member_names: tuple[str, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.method not in FUSION_METHODS:
            raise ValueError(f"unknown fusion method {self.method!r}; use one of {FUSION_METHODS}")
        if len(set(self.member_names)) != len(self.member_names):
            raise ValueError(f"member names must be distinct: {self.member_names}")
        if self.method == METHOD_VOTE:
            if self.weights is not None:
                raise ValueError("vote fusion takes no weights")
            return
        if self.weights is None:
            # Documented default: equal weights.
            n = len(self.member_names)
            object.__setattr__(self, "weights", tuple(1.0 / n for _ in range(n)))
        _check_weights(np.asarray(self.weights), len(self.member_names))

    def to_dict(self) -> dict:
        out: dict = {"method": self.method, "member_names": list(self.member_names)}
        if self.weights is not None:
            out["weights"] = [float(w) for w in self.weights]
        return out


def _check_weights(weights: np.ndarray, n_members: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_members,):
        raise ValueError(f"expected {n_members} weights, got shape {w.shape}")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValueError(f"weights must be finite and non-negative: {w}")
    if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights sum to {w.sum()}, expected 1 +/- {WEIGHT_SUM_TOL}")
    return w


def weighted_average(dists: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Componentwise convex combination of two or more distributions."""
    if len(dists) < 2:
        raise ValueError("weighted_average needs at least 2 distributions")
    w = _check_weights(np.asarray(weights), len(dists))
    stacked = np.vstack(dists)
    if stacked.ndim != 2:
        raise ValueError("distributions must share one label order")
    return w @ stacked


def plurality_vote(dists: list[np.ndarray]) -> int:
    """Label index winning the most member argmax votes.

    Ties break by the highest mean probability among the tied labels, then
    by the lowest label index.
    """
    if len(dists) < 2:
        raise ValueError("plurality_vote needs at least 2 distributions")
    stacked = np.vstack(dists)
    votes = np.zeros(stacked.shape[1], dtype=np.int64)
    for row in stacked:
        votes[int(np.argmax(row))] += 1
    best = votes.max()
    tied = np.flatnonzero(votes == best)
    if len(tied) == 1:
        return int(tied[0])
    means = stacked.mean(axis=0)[tied]
    # argmax returns the first (lowest-index) maximum, which is the
    # documented final tiebreak.
    return int(tied[int(np.argmax(means))])


def _one_hot(index: int, n: int) -> np.ndarray:
    row = np.zeros(n, dtype=np.float64)
    row[index] = 1.0
    return row


def fuse_tables(tables: list[PredictionTable], spec: FusionSpec) -> PredictionTable:
    """Row-wise fusion of member tables into one table.

    Members must share the exact label set and id set; an id mismatch is an
    error naming the symmetric difference, never a silent intersection.  The
    output model name is derived from the member names and method.
    """
    if len(tables) < 2:
        raise ValueError("fusion needs at least 2 member tables")
    if len(tables) != len(spec.member_names):
        raise ValueError(
            f"spec names {len(spec.member_names)} members but got {len(tables)} tables"
        )
    label_set = tables[0].label_set
    for t in tables[1:]:
        if t.label_set.labels != label_set.labels:
            raise ValueError(
                f"label sets differ: {label_set.labels} vs {t.label_set.labels}"
            )
    for a, b in combinations(tables, 2):
        diff = a.ids() ^ b.ids()
        if diff:
            raise ValueError(
                f"id sets differ between {a.model_name!r} and {b.model_name!r}; "
                f"symmetric difference: {sorted(diff)}"
            )

    n = len(label_set)
    rows: dict[str, np.ndarray] = {}
    if spec.method == METHOD_WEIGHTED_AVERAGE:
        w = np.asarray(spec.weights, dtype=np.float64)
        for utt_id in tables[0].rows:
            rows[utt_id] = weighted_average([t.rows[utt_id] for t in tables], w)
    else:
        for utt_id in tables[0].rows:
            winner = plurality_vote([t.rows[utt_id] for t in tables])
            rows[utt_id] = _one_hot(winner, n)

    name = "+".join(spec.member_names) + ":" + spec.method
    return PredictionTable(model_name=name, label_set=label_set, rows=rows)


def _simplex_grid(n_members: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors with components ``i / round(1 / step)`` summing to 1."""
    denom = round(1.0 / step)
    if denom < 1:
        raise ValueError(f"step {step} too coarse")

    def compositions(total: int, parts: int):
        if parts == 1:
            yield (total,)
            return
        for first in range(total + 1):
            for rest in compositions(total - first, parts - 1):
                yield (first, *rest)

    return [tuple(c / denom for c in comp) for comp in compositions(denom, n_members)]


def search_weights(
    tables: list[PredictionTable],
    gold: dict[str, int],
    step: float = 0.05,
) -> tuple[tuple[float, ...], float]:
    """Exhaustive grid search for the accuracy-maximizing fusion weights.

    Scores every weight vector on the simplex grid of resolution ``step``
    (unit-weight corners included, so the result is never worse on ``gold``
    than the best single member).  Ties prefer the largest first weight,
    then compare the remaining components lexicographically.

    Returns ``(weights, achieved_accuracy)``.
    """
    if len(tables) < 2:
        raise ValueError("weight search needs at least 2 member tables")
    if not 0.0 < step <= 0.5:
        raise ValueError(f"step must be in (0, 0.5], got {step}")
    ids = tables[0].ids()
    if not ids:
        raise ValueError("weight search needs at least one prediction row")
    missing = ids - set(gold)
    if missing:
        raise ValueError(f"gold labels missing for ids: {sorted(missing)[:5]}")

    names = tuple(t.model_name for t in tables)
    if len(set(names)) != len(names):
        names = tuple(f"{n}#{i}" for i, n in enumerate(names))

    best: tuple[float, tuple[float, ...]] | None = None
    for weights in _simplex_grid(len(tables), step):
        spec = FusionSpec(
            method=METHOD_WEIGHTED_AVERAGE, member_names=names, weights=weights
        )
        fused = fuse_tables(tables, spec)
        pred = fused.argmax()
        correct = sum(1 for utt_id in pred if pred[utt_id] == gold[utt_id])
        acc = correct / len(pred)
        key = (acc, weights)
        if best is None or key > best:
            best = key
    assert best is not None
    return best[1], best[0]

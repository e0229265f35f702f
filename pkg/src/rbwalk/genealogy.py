"""Pair sampling in a generation of the range and coalescence estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .environment import EnvTree
from .farm import FarmResult
from .stats import wilson_interval
from .walk import EdgeLocalTimeLedger

__all__ = [
    "PairSample",
    "GenealogyEstimate",
    "InsufficientReplicas",
    "MIN_ACCEPTED",
    "sample_pair",
    "lca_depth",
    "ancestor_groups",
    "c_ratio",
    "coalescence_estimates",
    "estimate_from_lca",
    "estimate_from_farm",
    "c_ratio_estimate",
]

MIN_ACCEPTED = 100


class InsufficientReplicas(RuntimeError):
    """Too few replicas had a nonempty target generation."""


@dataclass(frozen=True)
class PairSample:
    x: int
    y: int
    lca_depth: int
    generation: int
    replica: int


def lca_depth(tree: EnvTree, x: int, y: int) -> int:
    """Depth of the deepest common ancestor of ``x`` and ``y``."""
    while tree.depth(x) > tree.depth(y):
        x = tree.parent(x)
    while tree.depth(y) > tree.depth(x):
        y = tree.parent(y)
    while x != y:
        x, y = tree.parent(x), tree.parent(y)
    return tree.depth(x)


def sample_pair(ledger: EdgeLocalTimeLedger, k: int, rng: np.random.Generator) -> PairSample | None:
    """Two independent uniform draws, with replacement, from the generation-k range.

    Returns None when the generation is empty; callers count that as a
    rejection.
    """
    if ledger.flagged:
        raise ValueError(f"ledger is incomplete ({ledger.flagged})")
    verts = ledger.range_at(k)
    if len(verts) == 0:
        return None
    x, y = (int(v) for v in verts[rng.integers(len(verts), size=2)])
    return PairSample(x, y, lca_depth(ledger.tree, x, y), k, ledger.tree.replica)


def ancestor_groups(ledger: EdgeLocalTimeLedger, k: int, k_anc: int) -> np.ndarray:
    """Sizes of the groups of generation-k range vertices sharing a generation-k_anc ancestor."""
    if not 0 <= k_anc <= k:
        raise ValueError("need 0 <= k_anc <= k")
    tree = ledger.tree
    anc = ledger.range_at(k)
    parents = tree.parents
    for _ in range(k - k_anc):
        anc = parents[anc]
    _, sizes = np.unique(anc, return_counts=True)
    return sizes


def c_ratio(ledger: EdgeLocalTimeLedger, k: int, k_anc: int) -> float | None:
    """Fraction of ordered pairs of generation-k range vertices with lca depth >= k_anc.

    None when the generation is empty.
    """
    sizes = ancestor_groups(ledger, k, k_anc)
    total = int(sizes.sum())
    if total == 0:
        return None
    return float((sizes.astype(float) ** 2).sum() / total**2)


@dataclass
class GenealogyEstimate:
    """Empirical tail P(lca >= t) and head P(lca < t) per threshold, with Wilson intervals.

    ``theory`` maps (kind, threshold) to (value, standard error) where a
    reference value is available.
    """

    generation: int
    thresholds: np.ndarray
    tail: np.ndarray
    tail_ci: np.ndarray
    head: np.ndarray
    head_ci: np.ndarray
    accepted: int
    rejected: int
    theory: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / max(self.accepted + self.rejected, 1)

    def tail_at(self, threshold: int) -> float:
        return float(self.tail[list(self.thresholds).index(threshold)])

    def head_at(self, threshold: int) -> float:
        return float(self.head[list(self.thresholds).index(threshold)])

    def rows(self, n: int, p: int) -> list[tuple]:
        out = []
        for i, t in enumerate(self.thresholds):
            for kind, est, ci in (("tail", self.tail, self.tail_ci), ("head", self.head, self.head_ci)):
                th, th_se = self.theory.get((kind, int(t)), (math.nan, math.nan))
                out.append((n, p, self.generation, int(t), kind, float(est[i]), float(ci[i, 0]),
                            float(ci[i, 1]), th, th_se, self.accepted, self.rejected))
        return out


def estimate_from_lca(depths: Sequence[int], k: int, thresholds: Iterable[int], rejected: int = 0,
                      min_accepted: int = MIN_ACCEPTED) -> GenealogyEstimate:
    """Build the estimate from one lca depth per accepted replica."""
    depths = np.asarray(depths, dtype=np.int64)
    thr = np.asarray(sorted(set(int(t) for t in thresholds)), dtype=np.int64)
    if len(thr) == 0 or thr.min() < 0 or thr.max() > k:
        raise ValueError(f"thresholds must lie in [0, {k}]")
    if np.any((depths < 0) | (depths > k)):
        raise ValueError("lca depths must lie in [0, k]")
    acc = len(depths)
    if acc < min_accepted:
        raise InsufficientReplicas(f"{acc} accepted replicas, need at least {min_accepted}")
    hits = np.array([(depths >= t).sum() for t in thr], dtype=np.int64)
    tail = hits / acc
    head = (acc - hits) / acc
    tail_ci = np.array([wilson_interval(int(h), acc) for h in hits])
    head_ci = np.array([wilson_interval(int(acc - h), acc) for h in hits])
    return GenealogyEstimate(k, thr, tail, tail_ci, head, head_ci, acc, int(rejected))


def coalescence_estimates(ledgers: Iterable[EdgeLocalTimeLedger], k: int, thresholds: Iterable[int],
                          rng: np.random.Generator, min_accepted: int = MIN_ACCEPTED) -> GenealogyEstimate:
    """One uniform pair per replica; replicas with an empty generation k are rejected."""
    depths, rejected = [], 0
    for ledger in ledgers:
        pair = sample_pair(ledger, k, rng)
        if pair is None:
            rejected += 1
        else:
            depths.append(pair.lca_depth)
    return estimate_from_lca(depths, k, thresholds, rejected, min_accepted)


def estimate_from_farm(result: FarmResult, thresholds: Iterable[int],
                       min_accepted: int = MIN_ACCEPTED) -> GenealogyEstimate:
    """Estimate from a batched run; flagged replicas are dropped, not counted as rejections."""
    ok = ~result.flagged
    depths = result.lca[ok & result.accepted]
    rejected = int((ok & ~result.accepted).sum())
    return estimate_from_lca(depths, result.pair_generation, thresholds, rejected, min_accepted)


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) < MIN_ACCEPTED:
        raise InsufficientReplicas(f"{len(v)} accepted replicas, need at least {MIN_ACCEPTED}")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def c_ratio_estimate(replicas, k: int, k_anc: int) -> tuple[float, float]:
    """Mean and standard error of the all-pairs ratio over accepted replicas.

    ``replicas`` is an iterable of ledgers or a FarmResult whose thresholds
    include ``k_anc``.
    """
    if isinstance(replicas, FarmResult):
        if k != replicas.pair_generation:
            raise ValueError("k must equal the farm's pair generation")
        col = list(replicas.thresholds).index(k_anc)
        ok = replicas.accepted & ~replicas.flagged
        return _mean_se(replicas.cratio[ok, col])
    vals = [r for r in (c_ratio(led, k, k_anc) for led in replicas) if r is not None]
    return _mean_se(vals)

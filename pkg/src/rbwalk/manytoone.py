"""Tilted random walk, the constant c_inf and pools of W_infinity proxies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .environment import EnvFamily, c0_for_family, psi, sample_generation_potentials

__all__ = [
    "WinfPool",
    "LimitLawContext",
    "CinfEstimate",
    "sample_S_step",
    "estimate_cinf",
    "cinf_partial_sums",
    "sample_winf",
    "second_moment_fixed_point",
    "build_context",
]


def sample_S_step(family: EnvFamily, rng: np.random.Generator, size=None):
    """Steps of the walk with law E[f(S_1)] = E[sum_{|x|=1} exp(-V(x)) f(V(x))].

    Tilting Normal(m, s2) by exp(-v) and multiplying by d gives Normal(m - s2, s2).
    """
    return rng.normal(family.mean - family.sigma2, family.sd, size=size)


def cinf_partial_sums(family: EnvFamily, J: int, R: int, rng: np.random.Generator,
                      chunk: int = 20000) -> np.ndarray:
    """Per-path values of (sum_{j<=J'} exp(-S_j))^-1 for every J' = 0..J; shape (R, J+1)."""
    out = np.empty((R, J + 1))
    for start in range(0, R, chunk):
        stop = min(R, start + chunk)
        s = np.zeros((stop - start, J + 1))
        if J:
            s[:, 1:] = np.cumsum(sample_S_step(family, rng, (stop - start, J)), axis=1)
        out[start:stop] = 1.0 / np.cumsum(np.exp(-s), axis=1)
    return out


@dataclass(frozen=True)
class CinfEstimate:
    value: float
    se: float
    truncation: int


def estimate_cinf(family: EnvFamily, J: int | None = None, R: int = 100_000,
                  rng: np.random.Generator | None = None, step: int = 50,
                  max_truncation: int = 2000) -> CinfEstimate:
    """Mean of (sum_{j=0}^J exp(-S_j))^-1 over R paths.

    The truncated value overestimates c_inf and decreases in J path by path.
    Without an explicit J the truncation grows in blocks of ``step`` until
    one more block moves the estimate by less than half a standard error.
    """
    rng = np.random.default_rng() if rng is None else rng
    if J is not None:
        inv = 1.0 / _truncated_sums(family, J, R, rng)
        return CinfEstimate(float(inv.mean()), float(inv.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0, J)
    sums = _truncated_sums(family, step, R, rng, keep_state=True)
    totals, last = sums
    J = step
    while True:
        est = (1.0 / totals).mean()
        se = (1.0 / totals).std(ddof=1) / math.sqrt(R)
        more, last = _extend(family, totals, last, step, rng)
        if abs((1.0 / more).mean() - est) < se / 2 or J >= max_truncation:
            return CinfEstimate(float(est), float(se), J)
        totals = more
        J += step


def _truncated_sums(family, J, R, rng, keep_state=False):
    totals = np.ones(R)
    last = np.zeros(R)
    if J:
        totals, last = _extend(family, totals, last, J, rng)
    return (totals, last) if keep_state else totals


def _extend(family, totals, last, steps, rng, chunk=200):
    totals = totals.copy()
    last = last.copy()
    done = 0
    while done < steps:
        k = min(chunk, steps - done)
        s = last[:, None] + np.cumsum(sample_S_step(family, rng, (len(last), k)), axis=1)
        totals += np.exp(-s).sum(axis=1)
        last = s[:, -1]
        done += k
    return totals, last


@dataclass(frozen=True)
class WinfPool:
    """Samples of W_k used as stand-ins for W_infinity.

    ``stages`` counts how many resampling rounds built the pool; the
    standard error of the pool mean is inflated by sqrt(stages) because each
    round carries over the previous round's sampling error.
    """

    values: np.ndarray
    depth: int
    family: EnvFamily | None = None
    stages: int = 1

    def __len__(self):
        return len(self.values)

    @property
    def mean_se(self) -> float:
        return float(self.values.std(ddof=1) / math.sqrt(len(self.values)) * math.sqrt(self.stages))

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.values[rng.integers(0, len(self.values), size=size)]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["value"])
            for v in self.values:
                w.writerow([repr(float(v))])

    @classmethod
    def from_csv(cls, path, depth: int, family: EnvFamily | None = None, stages: int = 1) -> "WinfPool":
        with Path(path).open(encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["value"]:
            raise ValueError("pool CSV must have a single 'value' column")
        return cls(np.array([float(r[0]) for r in rows[1:]]), depth, family, stages)


def _exact_winf(family, k, R, rng, leaf_values=None, chunk_leaves=2_000_000):
    """W over depth-k trees; leaves carry 1 or draws from ``leaf_values``."""
    width = family.d ** k
    per_chunk = max(1, chunk_leaves // width)
    out = np.empty(R)
    for start in range(0, R, per_chunk):
        stop = min(R, start + per_chunk)
        v = sample_generation_potentials(family, k, stop - start, rng)
        w = np.exp(-v)
        if leaf_values is not None:
            w *= leaf_values[rng.integers(0, len(leaf_values), size=w.shape)]
        out[start:stop] = w.sum(axis=1)
    return out


def sample_winf(family: EnvFamily, k: int, R: int, rng: np.random.Generator | None = None,
                block_depth: int | None = None) -> WinfPool:
    """R samples of the additive martingale at generation k.

    For small k every sample is an independent full tree. Deeper proxies
    are built in blocks: a full tree of depth ``block_depth`` whose leaves
    carry draws from the pool of the remaining depth (the smoothing
    transform iterated blockwise).
    """
    rng = np.random.default_rng() if rng is None else rng
    if k < 0:
        raise ValueError("depth must be nonnegative")
    if k == 0:
        return WinfPool(np.ones(R), 0, family, 1)
    if block_depth is None:
        block_depth = max(1, int(math.floor(math.log(256) / math.log(family.d) + 1e-9)))
    first = k - block_depth * ((k - 1) // block_depth)
    values = _exact_winf(family, first, R, rng)
    depth, stages = first, 1
    while depth < k:
        values = _exact_winf(family, block_depth, R, rng, leaf_values=values)
        depth += block_depth
        stages += 1
    return WinfPool(values, k, family, stages)


def second_moment_fixed_point(family: EnvFamily) -> float:
    """E[W_inf^2] solved from the smoothing transform W = sum_{|u|=1} exp(-V(u)) W_u.

    Squaring and averaging gives E[W^2] = exp(psi(2)) E[W^2] + B with B the
    mean first-generation pair sum, so E[W^2] = B / (1 - exp(psi(2))), which
    is c0 itself.
    """
    q = math.exp(psi(family, 2.0))
    if q >= 1.0:
        return math.inf
    mean_weight = math.exp(-family.mean + family.sigma2 / 2.0)
    pair_sum = family.d * (family.d - 1) * mean_weight**2
    return pair_sum / (1.0 - q)


@dataclass
class LimitLawContext:
    c0: float
    c_inf: float
    c_inf_se: float
    pool: WinfPool
    family: EnvFamily | None = None

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not 0 < self.c_inf <= 1:
            raise ValueError("c_inf must lie in (0, 1]")
        if np.any(self.pool.values < 0):
            raise ValueError("W samples must be nonnegative")


def build_context(family: EnvFamily, rng: np.random.Generator, winf_depth: int = 30,
                  pool_size: int = 100_000, cinf_truncation: int | None = None,
                  cinf_replicas: int = 100_000) -> LimitLawContext:
    c = estimate_cinf(family, cinf_truncation, cinf_replicas, rng)
    pool = sample_winf(family, winf_depth, pool_size, rng)
    return LimitLawContext(c0_for_family(family), c.value, c.se, pool, family)

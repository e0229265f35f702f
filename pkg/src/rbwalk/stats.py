"""Statistics used by the property tests and acceptance runs."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Mapping

import numpy as np
from scipy import stats as sps

__all__ = [
    "StreamMoments",
    "stream_moments",
    "wilson_interval",
    "chi_square_gof",
    "chi_square_two_sample",
    "ks_two_sample",
    "passes_with_retry",
]

# every finite double is M * 2**E with |M| < 2**53 and E >= -1126
_S1_BITS = 1126
_S2_BITS = 2 * _S1_BITS


def _mantissas(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    x = x[x != 0]
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in stream")
    mant, expo = np.frexp(x)
    return (mant * 2.0**53).astype(np.int64), expo.astype(np.int64) - 53


def _sum_pow2(ints: np.ndarray, exps: np.ndarray, scale_bits: int) -> int:
    """Exact sum of ints * 2**(exps + scale_bits); needs |ints| < 2**54 and exps + scale_bits >= 0."""
    if ints.size == 0:
        return 0
    order = np.argsort(exps, kind="stable")
    exps, ints = exps[order], ints[order]
    bounds = np.flatnonzero(np.diff(exps)) + 1
    total = 0
    for grp_e, grp in zip(np.split(exps, bounds), np.split(ints, bounds)):
        # chunks of 256 keep int64 partial sums exact
        s = sum(int(c.sum()) for c in np.array_split(grp, len(grp) // 256 + 1))
        total += s << int(grp_e[0] + scale_bits)
    return total


def _exact_sums(x) -> tuple[int, int]:
    """(sum x * 2**1126, sum x**2 * 2**2252) as exact integers."""
    m, e = _mantissas(x)
    s1 = _sum_pow2(m, e, _S1_BITS)
    a = np.abs(m)
    hi, lo = a >> 27, a & ((1 << 27) - 1)
    e2 = 2 * e
    s2 = (_sum_pow2(hi * hi, e2 + 54, _S2_BITS) + _sum_pow2(2 * hi * lo, e2 + 27, _S2_BITS)
          + _sum_pow2(lo * lo, e2, _S2_BITS))
    return s1, s2


@dataclass
class StreamMoments:
    """Count, sum and sum of squares held exactly, so merging in any order
    gives bit-identical results."""

    n: int = 0
    s1: int = 0
    s2: int = 0

    def update(self, values) -> "StreamMoments":
        x = np.asarray(values, dtype=np.float64).ravel()
        s1, s2 = _exact_sums(x)
        self.n += x.size
        self.s1 += s1
        self.s2 += s2
        return self

    def merge(self, other: "StreamMoments") -> "StreamMoments":
        return StreamMoments(self.n + other.n, self.s1 + other.s1, self.s2 + other.s2)

    __add__ = merge

    @property
    def mean(self) -> float:
        if self.n == 0:
            raise ValueError("mean of an empty stream")
        return float(Fraction(self.s1, self.n << _S1_BITS))

    @property
    def variance(self) -> float:
        if self.n < 2:
            raise ValueError("variance needs at least two values")
        s1 = Fraction(self.s1, 1 << _S1_BITS)
        s2 = Fraction(self.s2, 1 << _S2_BITS)
        return float((s2 - s1 * s1 / self.n) / (self.n - 1))

    @property
    def se(self) -> float:
        return math.sqrt(self.variance / self.n)


def stream_moments(values) -> tuple[int, float, float, float]:
    """(n, mean, variance, standard error) of ``values``."""
    acc = StreamMoments().update(values)
    return acc.n, acc.mean, acc.variance, acc.se


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    if trials <= 0:
        raise ValueError("need at least one trial")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return lo, hi


def _pool_adjacent(observed: np.ndarray, expected: np.ndarray, min_expected: float):
    obs_out, exp_out = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_out.append(acc_o)
            exp_out.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_out:
            obs_out[-1] += acc_o
            exp_out[-1] += acc_e
        else:
            obs_out.append(acc_o)
            exp_out.append(acc_e)
    return np.array(obs_out), np.array(exp_out)


def chi_square_gof(observed, expected_probs, min_expected: float = 5.0, ddof: int = 0) -> float:
    """p-value of Pearson's test; adjacent bins are pooled until each expects >= ``min_expected``.

    If the probabilities sum to less than one, the missing mass becomes a
    final bin with no observations.
    """
    observed = np.asarray(observed, dtype=float)
    probs = np.asarray(expected_probs, dtype=float)
    if observed.shape != probs.shape:
        raise ValueError("observed counts and probabilities must align")
    total = observed.sum()
    residual = 1.0 - probs.sum()
    if residual > 1e-12:
        observed = np.append(observed, 0.0)
        probs = np.append(probs, residual)
    obs, exp = _pool_adjacent(observed, probs * total, min_expected)
    if len(obs) < 2:
        return 1.0
    exp = exp * obs.sum() / exp.sum()
    if np.any(exp == 0):
        return 0.0 if np.any(obs[exp == 0] > 0) else 1.0
    return float(sps.chisquare(obs, exp, ddof=ddof).pvalue)


def chi_square_two_sample(sample_a: Iterable[Hashable] | Mapping, sample_b: Iterable[Hashable] | Mapping,
                          min_expected: float = 5.0) -> float:
    """Homogeneity test of two samples over a common categorical support.

    Categories expected to hold fewer than ``min_expected`` counts in either
    sample are pooled into one bin (merged with the smallest remaining
    category if still too small).
    """
    ca = sample_a if isinstance(sample_a, Mapping) else Counter(sample_a)
    cb = sample_b if isinstance(sample_b, Mapping) else Counter(sample_b)
    na, nb = sum(ca.values()), sum(cb.values())
    if na == 0 or nb == 0:
        raise ValueError("both samples must be nonempty")
    cats = sorted(set(ca) | set(cb), key=repr)
    frac = min(na, nb) / (na + nb)
    big, small_a, small_b = [], 0, 0
    for c in cats:
        tot = ca.get(c, 0) + cb.get(c, 0)
        if tot * frac >= min_expected:
            big.append((ca.get(c, 0), cb.get(c, 0)))
        else:
            small_a += ca.get(c, 0)
            small_b += cb.get(c, 0)
    if small_a + small_b > 0:
        if (small_a + small_b) * frac >= min_expected or not big:
            big.append((small_a, small_b))
        else:
            i = min(range(len(big)), key=lambda j: sum(big[j]))
            big[i] = (big[i][0] + small_a, big[i][1] + small_b)
    if len(big) < 2:
        return 1.0
    table = np.array(big, dtype=float).T
    return float(sps.chi2_contingency(table, correction=False).pvalue)


def ks_two_sample(xs, ys) -> tuple[float, float]:
    res = sps.ks_2samp(np.asarray(xs), np.asarray(ys))
    return float(res.statistic), float(res.pvalue)


def passes_with_retry(run: Callable[[int], float], alpha: float = 0.001) -> tuple[bool, list[float]]:
    """Run a test returning a p-value; on rejection rerun once with fresh randomness.

    ``run`` receives the attempt number (0 or 1) and must use independent
    randomness for each.
    """
    pvals = [run(0)]
    if pvals[0] <= alpha:
        pvals.append(run(1))
    return pvals[-1] > alpha, pvals

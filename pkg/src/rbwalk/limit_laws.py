"""Samplers and evaluators for the limit objects of the range and its genealogy.

The Feller diffusion with branching mechanism c0*lambda^2 has compound
Poisson transitions: from state y over time t it holds Poisson(y/(c0 t))
independent exponential masses of mean c0 t. Every sampler here uses that
exact representation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .environment import EnvFamily, sample_generation_potentials
from .manytoone import WinfPool

__all__ = [
    "FellerParams",
    "CoalescentParams",
    "LimitEstimate",
    "SeriesResult",
    "IntegralResult",
    "feller_step",
    "feller_laplace",
    "z_limit_sample",
    "polya_aeppli_sample",
    "polya_aeppli_pmf",
    "ratio_moment_exact",
    "ratio_moment_mc",
    "recent_past_limit_mc",
    "recent_past_limit_series",
    "single_excursion_limit",
    "remote_past_limit_mc",
    "remote_past_limit_integral",
    "small_generation_limit",
    "volume_limit_laplace",
    "subtree_masses",
]


@dataclass(frozen=True)
class FellerParams:
    c0: float

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")


@dataclass(frozen=True)
class CoalescentParams:
    a: float
    b: float
    c0: float
    w: float

    def __post_init__(self):
        if not 0 < self.a < self.b:
            raise ValueError(f"need 0 < a < b, got a={self.a}, b={self.b}")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if np.any(np.asarray(self.w) < 0):
            raise ValueError("w must be nonnegative")

    @property
    def cluster_rate(self):
        """Mean number of clusters, w / (b c0)."""
        return np.asarray(self.w) / (self.b * self.c0)

    @property
    def cluster_success(self) -> float:
        """Success probability of each cluster's geometric size."""
        return 1.0 - self.a / self.b


@dataclass(frozen=True)
class LimitEstimate:
    value: float
    se: float
    accepted: int
    total: int

    @property
    def acceptance(self) -> float:
        return self.accepted / self.total if self.total else 0.0


def feller_step(rng: np.random.Generator, y, delta: float, c0: float):
    """Exact transition of the Feller diffusion over time ``delta``; 0 is absorbing."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    y = np.asarray(y, dtype=float)
    k = rng.poisson(y / (c0 * delta))
    out = np.asarray(rng.gamma(np.maximum(k, 1), c0 * delta) * (k > 0))
    return out if out.ndim else float(out)


def feller_laplace(lam, y, delta: float, c0: float):
    """E[exp(-lam Y_delta) | Y_0 = y] = exp(-lam y / (1 + c0 delta lam))."""
    return np.exp(-lam * y / (1.0 + c0 * delta * lam))


def z_limit_sample(rng: np.random.Generator, a: float, w, c0: float):
    """w * Y_{a/w} started from 1: Poisson(w/(c0 a)) exponentials of mean c0 a."""
    if a <= 0:
        raise ValueError("a must be positive")
    w = np.asarray(w, dtype=float)
    k = rng.poisson(w / (c0 * a))
    out = np.asarray(rng.gamma(np.maximum(k, 1), c0 * a) * (k > 0))
    return out if out.ndim else float(out)


def polya_aeppli_sample(rng: np.random.Generator, params: CoalescentParams, size=None):
    """Sum of Poisson(w/(b c0)) independent Geometric(1 - a/b) variables on {1, 2, ...}."""
    rate = params.cluster_rate
    if size is not None:
        rate = np.broadcast_to(rate, size)
    clusters = rng.poisson(rate)
    extra = rng.negative_binomial(np.maximum(clusters, 1), params.cluster_success) * (clusters > 0)
    out = clusters + extra
    return out if np.ndim(out) else int(out)


def polya_aeppli_pmf(ell: int, params: CoalescentParams) -> float:
    mu = float(params.cluster_rate)
    if ell < 0:
        return 0.0
    if ell == 0:
        return math.exp(-mu)
    if mu == 0.0:
        return 0.0
    r = params.a / params.b
    j = np.arange(1, ell + 1)
    logs = (j * math.log(mu) - mu - gammaln(j + 1)
            + gammaln(ell) - gammaln(j) - gammaln(ell - j + 1)
            + j * math.log1p(-r))
    if r > 0:
        logs = logs + (ell - j) * math.log(r)
    return float(np.exp(logs).sum())


def ratio_moment_exact(ell: int) -> float:
    """E[sum xi_j^2 / (sum xi_j)^2] for ``ell`` i.i.d. exponentials."""
    if ell < 1:
        raise ValueError("ratio is undefined for an empty sum")
    return 2.0 / (ell + 1)


def ratio_moment_mc(rng: np.random.Generator, ell: int, draws: int, chunk: int = 200_000) -> LimitEstimate:
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        xi = rng.exponential(size=(k, ell))
        r = (xi**2).sum(axis=1) / xi.sum(axis=1) ** 2
        total += r.sum()
        total_sq += (r**2).sum()
        done += k
    mean = total / draws
    var = max(total_sq / draws - mean**2, 0.0) * draws / max(draws - 1, 1)
    return LimitEstimate(mean, math.sqrt(var / draws), draws, draws)


def recent_past_limit_mc(a: float, b: float, c0: float, pool: WinfPool,
                         rng: np.random.Generator, samples: int = 1_000_000) -> LimitEstimate:
    """E[sum xi^2 / (sum xi)^2 | N_{a,b} > 0] with N_{a,b} drawn over the pool.

    The inner exponential ratio is replaced by its exact mean 2/(N+1).
    """
    CoalescentParams(a, b, c0, 0.0)
    if not np.any(pool.values > 0):
        raise ValueError("degenerate pool: every W sample is zero")
    w = pool.draw(rng, samples)
    n = polya_aeppli_sample(rng, CoalescentParams(a, b, c0, w))
    keep = n > 0
    vals = 2.0 / (n[keep] + 1.0)
    if len(vals) < 2:
        raise ValueError("too few accepted samples")
    return LimitEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))),
                         int(keep.sum()), samples)


@dataclass(frozen=True)
class SeriesResult:
    value: float
    tail_bound: float
    terms: int


def recent_past_limit_series(a: float, b: float, c0: float, pool: WinfPool, K_max: int = 60,
                             tolerance: float = 1e-3) -> SeriesResult:
    """Power series in a of the recent-past limit, with pool-estimated derivatives of
    psi_b(lam) = E[exp(-lam W / (b c0))] at lam = 1."""
    CoalescentParams(a, b, c0, 0.0)
    x = pool.values / (b * c0)
    if not np.any(x > 0):
        raise ValueError("degenerate pool: every W sample is zero")
    r = a / b
    one_minus_psi = float(np.mean(-np.expm1(-x)))
    # scaled derivatives (-1)^j psi_b^(j)(1) / j! = E[x^j e^{-x}] / j!
    j = np.arange(1, K_max + 1)
    with np.errstate(divide="ignore"):
        logx = np.log(x)
    logs = np.where(x[:, None] > 0, j[None, :] * logx[:, None], -np.inf) - x[:, None] - gammaln(j + 1)[None, :]
    scaled = np.exp(logs).mean(axis=0)
    total = 0.0
    mass = 0.0
    for k in range(1, K_max + 1):
        jj = np.arange(1, k + 1)
        binom = np.exp(gammaln(k) - gammaln(jj) - gammaln(k - jj + 1))
        weights = binom * r ** (k - jj) * (1 - r) ** jj
        pk = float((weights * scaled[:k]).sum())
        mass += pk
        total += pk / (k + 1)
    value = 2.0 * total / one_minus_psi
    tail = 2.0 / (K_max + 2) * max(one_minus_psi - mass, 0.0) / one_minus_psi
    if tail > tolerance:
        warnings.warn(f"series tail bound {tail:.3g} exceeds {tolerance:g}; raise K_max", RuntimeWarning)
    return SeriesResult(value, tail, K_max)


def single_excursion_limit(a: float, b: float) -> float:
    """Limit of P(lca >= floor(a n)) in generation floor(b n) after one excursion."""
    if not 0 < a < b:
        raise ValueError("need 0 < a < b")
    return 2.0 * (b - a) / a**2 * (b * math.log(b / (b - a)) - a)


def subtree_masses(family: EnvFamily, m: int, size: int, pool: WinfPool,
                   rng: np.random.Generator) -> np.ndarray:
    """exp(-V(u)) W^(u) for every generation-m vertex u of ``size`` independent trees."""
    z = np.exp(-sample_generation_potentials(family, m, size, rng))
    z *= pool.draw(rng, z.shape)
    return z


def _chunks(total: int, width: int, leaves: int = 1_000_000):
    per = max(1, leaves // max(width, 1))
    for start in range(0, total, per):
        yield min(per, total - start)


def remote_past_limit_mc(m: int, b: float, c0: float, family: EnvFamily, replicas: int,
                         pool: WinfPool, rng: np.random.Generator) -> LimitEstimate:
    """Limit of P(lca < m | generation floor(b n) nonempty) by direct simulation."""
    if m < 1:
        raise ValueError("m must be at least 1")
    vals = []
    for k in _chunks(replicas, family.d ** m):
        z = subtree_masses(family, m, k, pool, rng)
        x = z_limit_sample(rng, b, z, c0)
        s = x.sum(axis=1)
        keep = s > 0
        vals.append(1.0 - (x[keep] ** 2).sum(axis=1) / s[keep] ** 2)
    vals = np.concatenate(vals)
    if len(vals) < 0.01 * replicas:
        warnings.warn(f"conditioning acceptance {len(vals) / replicas:.3%} below 1%", RuntimeWarning)
    if len(vals) < 2:
        raise ValueError("too few accepted replicas")
    return LimitEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))),
                         len(vals), replicas)


@dataclass(frozen=True)
class IntegralResult:
    """``conditional`` is E[sum X_u^2 / (sum X_u)^2 | sum X_u > 0]; ``value`` = 1 - conditional.

    ``survival`` is the normalizer computed from the same environment
    samples, P(sum X_u > 0) = E[1 - exp(-sum Z_u / (b c0))]; ``survival_pool``
    is 1 - psi_b(1) from the W pool alone. They agree when sum Z_u has the law of W.
    """

    value: float
    conditional: float
    se: float
    survival: float
    survival_pool: float


def _integral_per_sample(A, B, s, nodes):
    # after u = lam / (1 + lam s): integrand [u (1 - u s) A + 2 s u B] exp(-u B) on [0, 1/s]
    t, wts = np.polynomial.legendre.leggauss(nodes)
    u = (t + 1.0) / (2.0 * s)
    wts = wts / (2.0 * s)
    vals = (np.outer(A, u * (1 - u * s)) + 2 * s * np.outer(B, u)) * np.exp(-np.outer(B, u))
    return vals @ wts


def remote_past_limit_integral(m: int, b: float, c0: float, family: EnvFamily, replicas: int,
                               pool: WinfPool, rng: np.random.Generator, nodes: int = 64) -> IntegralResult:
    """Remote-past limit via the lambda-integral representation, averaged over
    environment samples; Gauss-Legendre on the bounded substituted interval."""
    if m < 1:
        raise ValueError("m must be at least 1")
    s = b * c0
    num = []
    surv = []
    for k in _chunks(replicas, family.d ** m):
        z = subtree_masses(family, m, k, pool, rng)
        A = (z**2).sum(axis=1)
        B = z.sum(axis=1)
        num.append(_integral_per_sample(A, B, s, nodes))
        surv.append(-np.expm1(-B / s))
    num = np.concatenate(num)
    surv = np.concatenate(surv)
    p = surv.mean()
    cond = num.mean() / p
    # delta-method standard error of the ratio of means
    resid = num - cond * surv
    se = float(resid.std(ddof=1) / math.sqrt(len(num)) / p)
    pool_surv = float(np.mean(-np.expm1(-pool.values / s)))
    return IntegralResult(1.0 - cond, float(cond), se, float(p), pool_surv)


def small_generation_limit(m: int, family: EnvFamily, pool: WinfPool, replicas: int,
                           rng: np.random.Generator) -> dict[int, LimitEstimate]:
    """E[pair sum over distinct-ancestry pairs / W^2] for every m' = 1..m.

    The pair sum over distinct generation-k vertices with lca depth < m'
    tends, as k grows, to (sum Z_u)^2 - sum_u Z_u^2 over the generation-m'
    subtree masses Z_u. All m' share one environment per replica, so the
    estimates are nondecreasing in m' sample by sample. The tree never dies
    out, so the survival conditioning accepts every replica.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    per_level = {mm: [] for mm in range(1, m + 1)}
    for k in _chunks(replicas, family.d ** m):
        z = subtree_masses(family, m, k, pool, rng)
        total = z.sum(axis=1)
        keep = total > 0
        for mm in range(m, 0, -1):
            per_level[mm].append(1.0 - (z[keep] ** 2).sum(axis=1) / total[keep] ** 2)
            if mm > 1:
                z = z.reshape(k, -1, family.d).sum(axis=2)
    out = {}
    for mm, chunks in per_level.items():
        v = np.concatenate(chunks)
        out[mm] = LimitEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), len(v), replicas)
    return out


def volume_limit_laplace(theta: float, a: float, c0: float, pool: WinfPool) -> float:
    """E[exp(-theta W Y_{a/W})] = E[exp(-theta W / (1 + theta c0 a))] over the pool."""
    if theta < 0 or a <= 0:
        raise ValueError("need theta >= 0 and a > 0")
    return float(np.mean(np.exp(-theta * pool.values / (1.0 + theta * c0 * a))))

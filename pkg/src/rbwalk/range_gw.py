"""Direct simulation of the range as a multi-type Galton-Watson tree.

Given that the edge into ``x`` is crossed ``k`` times, the crossing counts
of the children of ``x`` are the numbers of child outcomes seen before the
``k``-th parent outcome in i.i.d. draws from the one-step law at ``x``.
Sampling generation by generation therefore reproduces the walk's edge
local times without simulating the walk step by step.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from . import _rng
from ._rng import next_uniform
from .environment import (
    DEPTH, FIRST, NCHILD, RELTOT, RELW, EnvTree, VertexBudgetExceeded,
    conductance_H, grow_rows, grow_vec, materialize_vertex,
)
from .walk import FLAG_REASONS, STATUS_BUDGET, STATUS_DONE, STATUS_GEN_CAP, STATUS_STUCK, EdgeLocalTimeLedger

__all__ = [
    "offspring_counts_sample",
    "negative_multinomial_pmf",
    "simulate_range",
    "quenched_edge_moments",
    "lca",
]


def offspring_counts_sample(rng: np.random.Generator, k: int, probs) -> np.ndarray:
    """Child crossing counts given ``k`` crossings into the parent edge.

    ``probs[0]`` is the probability of stepping back to the parent and
    ``probs[1:]`` those of the children. Categorical draws are taken in
    batches and cut at the ``k``-th parent outcome.
    """
    probs = np.asarray(probs, dtype=float)
    counts = np.zeros(len(probs) - 1, dtype=np.int64)
    if k <= 0:
        return counts
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    remaining = int(k)
    batch = max(16, int(2 * k / max(probs[0], 1e-12)))
    while remaining > 0:
        draws = np.searchsorted(cdf, rng.random(batch), side="right")
        parent_hits = np.flatnonzero(draws == 0)
        if len(parent_hits) >= remaining:
            draws = draws[: parent_hits[remaining - 1]]
            remaining = 0
        else:
            remaining -= len(parent_hits)
        counts += np.bincount(draws[draws > 0] - 1, minlength=len(counts))
    return counts


def negative_multinomial_pmf(child_counts, k: int, probs) -> float:
    """P(child counts) for the negative multinomial with ``k`` parent outcomes."""
    probs = np.asarray(probs, dtype=float)
    child_counts = np.asarray(child_counts, dtype=np.int64)
    if k == 0:
        return float(np.all(child_counts == 0))
    s = int(child_counts.sum())
    logp = math.lgamma(k + s) - math.lgamma(k) - sum(math.lgamma(c + 1) for c in child_counts)
    logp += k * math.log(probs[0])
    for c, p in zip(child_counts, probs[1:]):
        if c:
            logp += c * math.log(p)
    return math.exp(logp)


@njit(cache=True, nogil=True)
def gw_kernel(ints, flts, keys, size, budget, d, mean, sd, N, st, p, max_gen, gen_cap):
    """Breadth-first range construction. Returns status, size, arrays and
    the last generation that was filled in."""
    N[0] = p
    frontier = np.zeros(max(16, d), np.int64)
    frontier[0] = 0
    flen = 1
    gen = 0
    status = STATUS_DONE
    while flen > 0:
        if max_gen >= 0 and gen >= max_gen:
            break
        if gen >= gen_cap:
            status = STATUS_GEN_CAP
            break
        nxt = np.zeros(max(16, 2 * flen * max(d, 1)), np.int64)
        nlen = 0
        for i in range(flen):
            x = frontier[i]
            nch = ints[x, NCHILD]
            if nch < 0:
                if d == 0:
                    return STATUS_STUCK, size, ints, flts, keys, N, gen
                if size + d > budget:
                    return STATUS_BUDGET, size, ints, flts, keys, N, gen
                if size + d > ints.shape[0]:
                    cap = min(max(2 * ints.shape[0], size + d), budget)
                    ints = grow_rows(ints, cap)
                    flts = grow_rows(flts, cap)
                    keys = grow_vec(keys, cap)
                    N = grow_vec(N, cap)
                size = materialize_vertex(x, ints, flts, keys, size, d, mean, sd)
                nch = d
            first = ints[x, FIRST]
            tot = flts[x, RELTOT]
            k = N[x]
            seen = 0
            while seen < k:
                u = next_uniform(st) * tot
                if u < 1.0 or nch == 0:
                    seen += 1
                    continue
                u -= 1.0
                c = first + nch - 1
                for j in range(first, first + nch):
                    w = flts[j, RELW]
                    if u < w:
                        c = j
                        break
                    u -= w
                N[c] += 1
            if nlen + nch > nxt.shape[0]:
                nxt = grow_vec(nxt, 2 * nxt.shape[0] + nch)
            for c in range(first, first + nch):
                if N[c] > 0:
                    nxt[nlen] = c
                    nlen += 1
        frontier = nxt
        flen = nlen
        gen += 1
    return status, size, ints, flts, keys, N, gen


def simulate_range(tree: EnvTree, p: int, gen_cap: int | None = None, *,
                   max_generation: int | None = None, stream: np.ndarray | None = None,
                   strict: bool = False) -> EdgeLocalTimeLedger:
    """Sample the crossing counts of the first ``p`` excursions generation by generation.

    With ``max_generation`` the construction stops once that generation is
    filled in; the counts up to it have exactly their full-run law.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if gen_cap is None:
        gen_cap = 8 * max(p, max_generation or 0)
    if stream is None:
        stream = _rng.new_stream(tree.seed, tree.replica, _rng.TAG_GW)
    d, mean, sd = tree.kernel_params
    N = np.zeros(tree.ints.shape[0], np.int64)
    status, size, ints, flts, keys, N, gen = gw_kernel(
        tree.ints, tree.flts, tree.keys, tree.size, tree.vertex_budget, d, mean, sd,
        N, stream, int(p), -1 if max_generation is None else int(max_generation), int(gen_cap))
    tree.adopt(size, ints, flts, keys)
    flagged = FLAG_REASONS.get(status)
    if flagged and strict:
        if status == STATUS_BUDGET:
            raise VertexBudgetExceeded(f"vertex budget {tree.vertex_budget} exceeded")
        raise RuntimeError(f"replica flagged: {flagged}")
    return EdgeLocalTimeLedger(tree, "gw", int(p), N[:size].copy(), None, max_generation, flagged)


def lca(tree: EnvTree, x: int, y: int) -> int:
    """Index of the deepest common ancestor of ``x`` and ``y``."""
    while tree.depth(x) > tree.depth(y):
        x = tree.parent(x)
    while tree.depth(y) > tree.depth(x):
        y = tree.parent(y)
    while x != y:
        x, y = tree.parent(x), tree.parent(y)
    return x


def quenched_edge_moments(tree: EnvTree, x: int, y: int) -> tuple[float, float, float]:
    """(E[N_x^2], E[N_x N_y], E[N_x 1{N_y >= 1}]) for one excursion on a fixed tree.

    Requires distinct non-root vertices of equal depth. Depth-1 pairs are
    accepted: the formulas stay valid there because the root edge is
    crossed exactly once.
    """
    if x == y or x <= 0 or y <= 0:
        raise ValueError("need two distinct non-root vertices")
    if tree.depth(x) != tree.depth(y):
        raise ValueError("x and y must lie in the same generation")
    vx, vy = tree.V(x), tree.V(y)
    hx = conductance_H(tree, 0, x)
    hy = conductance_H(tree, 0, y)
    z = lca(tree, x, y)
    hz = conductance_H(tree, 0, z)
    common = hz * math.exp(tree.V(z)) * math.exp(-vx)
    second = math.exp(-vx) * (2.0 * hx - 1.0)
    joint = 2.0 * common * math.exp(-vy)
    # child of the common ancestor on the path to y
    below = y
    while tree.parent(below) != z:
        below = tree.parent(below)
    h_tail = conductance_H(tree, below, y)
    hit = (1.0 + h_tail / hy) * common * math.exp(-vy) / hy
    return second, joint, hit

"""The biased walk on the tree, run excursion by excursion, and its ledger."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _rng
from ._rng import next_uniform
from .environment import (
    DEPTH, FIRST, NCHILD, PARENT, RELTOT, RELW, EnvTree, VertexBudgetExceeded,
    conductance_H, grow_rows, grow_vec, materialize_vertex,
)

__all__ = [
    "E_STAR",
    "EdgeLocalTimeLedger",
    "WalkTrace",
    "TransitionLaw",
    "ExcursionRecord",
    "transition_distribution",
    "run_excursions",
    "observables",
    "alpha_beta",
    "reduced_range_diagnostic",
    "ReducedRangeDiagnostic",
    "ledger_violations",
]

E_STAR = -1

STATUS_DONE = 0
STATUS_GEN_CAP = 1
STATUS_BUDGET = 2
STATUS_STUCK = 3
FLAG_REASONS = {STATUS_GEN_CAP: "gen_cap", STATUS_BUDGET: "vertex_budget",
                STATUS_STUCK: "unmaterialized vertex in a fixed tree"}


@dataclass
class EdgeLocalTimeLedger:
    """Edge local times of one replica.

    ``crossings[x]`` counts traversals of the edge from the parent of ``x``
    into ``x``; ``visits[x]`` counts excursions that visited ``x`` (walk
    backend only). When ``horizon`` is set the counts are exact for vertices
    of depth at most ``horizon`` and unknown below it.
    """

    tree: EnvTree
    backend: str
    p: int
    crossings: np.ndarray
    visits: np.ndarray | None = None
    horizon: int | None = None
    flagged: str | None = None
    level_visits: np.ndarray | None = None
    Z: np.ndarray = field(init=False)
    R: np.ndarray = field(init=False)

    def __post_init__(self):
        depths = self.tree.depths[: len(self.crossings)]
        nz = self.crossings > 0
        top = int(depths[nz].max()) if nz.any() else 0
        if self.horizon is not None:
            top = min(top, self.horizon)
        length = top + 2
        keep = depths < length
        self.Z = np.bincount(depths[keep], weights=self.crossings[keep], minlength=length).astype(np.int64)
        self.R = np.bincount(depths[keep & nz], minlength=length).astype(np.int64)
        if self.horizon is not None and self.horizon == top:
            # generation horizon+1 was never explored
            self.Z = self.Z[: top + 1]
            self.R = self.R[: top + 1]

    def _check_generation(self, k: int):
        if k < 0:
            raise ValueError("generation must be nonnegative")
        if self.horizon is not None and k > self.horizon:
            raise ValueError(f"generation {k} lies beyond the observation horizon {self.horizon}")

    def Z_k(self, k: int) -> int:
        self._check_generation(k)
        return int(self.Z[k]) if k < len(self.Z) else 0

    def R_k(self, k: int) -> int:
        self._check_generation(k)
        return int(self.R[k]) if k < len(self.R) else 0

    def range_at(self, k: int) -> np.ndarray:
        """Indices of generation-k vertices with at least one crossing."""
        self._check_generation(k)
        n = len(self.crossings)
        return np.flatnonzero((self.tree.depths[:n] == k) & (self.crossings > 0))


@dataclass
class WalkTrace:
    """Generations visited at steps 1..tau^n; -1 marks the virtual parent."""

    generations: np.ndarray | None
    steps: int


@dataclass
class ExcursionRecord:
    """Per-excursion increments collected during one long run.

    ``watched[j, i]`` is the crossing count of ``watch[i]`` during excursion
    ``j``; ``generation_counts[j]`` holds (Z_g, R_g) of excursion ``j``.
    """

    watch: np.ndarray
    watched: np.ndarray
    generation: int | None
    generation_counts: np.ndarray | None


@dataclass(frozen=True)
class TransitionLaw:
    targets: np.ndarray
    probs: np.ndarray


def transition_distribution(tree: EnvTree, vertex: int) -> TransitionLaw:
    """One-step law from ``vertex``: parent first, then children in order."""
    if vertex == E_STAR:
        return TransitionLaw(np.array([0]), np.array([1.0]))
    kids = tree.children(vertex)
    v = tree.V(vertex)
    weights = np.array([1.0] + [math.exp(-(tree.V(c) - v)) for c in kids])
    return TransitionLaw(np.array([tree.parent(vertex)] + kids), weights / weights.sum())


def alpha_beta(tree: EnvTree, x: int) -> tuple[float, float]:
    """Hitting probability of ``x`` in one excursion and the geometric success rate."""
    if x == E_STAR or x == 0:
        raise ValueError("alpha/beta are defined for non-root vertices only")
    h = conductance_H(tree, 0, x)
    return math.exp(-tree.V(x)) / h, 1.0 / h


@njit(cache=True, nogil=True)
def _walk_kernel(ints, flts, keys, size, budget, d, mean, sd,
                 N, E, last, levels, st, state, n_target, horizon, gen_cap,
                 watch, watch_out, watch_prev, rec_gen, rec_out, rec_cnt,
                 trace_on, tbuf, tlen):
    cur = state[0]
    done = state[1]
    steps = state[2]
    maxdep = state[3]
    status = STATUS_DONE
    while True:
        dep = ints[cur, DEPTH]
        to_parent = False
        target = -1
        if horizon >= 0 and dep >= horizon:
            to_parent = True
        else:
            nch = ints[cur, NCHILD]
            if nch < 0:
                if d == 0:
                    status = STATUS_STUCK
                    break
                if size + d > budget:
                    status = STATUS_BUDGET
                    break
                if size + d > ints.shape[0]:
                    cap = min(max(2 * ints.shape[0], size + d), budget)
                    ints = grow_rows(ints, cap)
                    flts = grow_rows(flts, cap)
                    keys = grow_vec(keys, cap)
                    N = grow_vec(N, cap)
                    E = grow_vec(E, cap)
                    old = last.shape[0]
                    last = grow_vec(last, cap)
                    last[old:] = -1
                size = materialize_vertex(cur, ints, flts, keys, size, d, mean, sd)
                nch = d
            u = next_uniform(st) * flts[cur, RELTOT]
            if u < 1.0 or nch == 0:
                to_parent = True
            else:
                u -= 1.0
                first = ints[cur, FIRST]
                target = first + nch - 1
                for c in range(first, first + nch):
                    w = flts[c, RELW]
                    if u < w:
                        target = c
                        break
                    u -= w
        if trace_on and tlen[0] + 2 > tbuf.shape[0]:
            tbuf = grow_vec(tbuf, 2 * tbuf.shape[0] + 2)
        steps += 1
        if to_parent:
            if cur == 0:
                # to e*, then the forced step back to e closes the excursion
                steps += 1
                if trace_on:
                    tbuf[tlen[0]] = -1
                    tbuf[tlen[0] + 1] = 0
                    tlen[0] += 2
                N[0] += 1
                E[0] += 1
                levels[0] += 1
                for i in range(watch.shape[0]):
                    cnt = N[watch[i]]
                    watch_out[done, i] = cnt - watch_prev[i]
                    watch_prev[i] = cnt
                if rec_gen >= 0:
                    rec_out[done, 0] = rec_cnt[0]
                    rec_out[done, 1] = rec_cnt[1]
                    rec_cnt[0] = 0
                    rec_cnt[1] = 0
                done += 1
                if done == n_target:
                    break
            else:
                cur = ints[cur, PARENT]
                levels[dep - 1] += 1
                if trace_on:
                    tbuf[tlen[0]] = dep - 1
                    tlen[0] += 1
        else:
            cdep = dep + 1
            if cdep >= gen_cap:
                status = STATUS_GEN_CAP
                break
            N[target] += 1
            if last[target] != done:
                last[target] = done
                E[target] += 1
                if cdep == rec_gen:
                    rec_cnt[1] += 1
            if cdep == rec_gen:
                rec_cnt[0] += 1
            levels[cdep] += 1
            if cdep > maxdep:
                maxdep = cdep
            if trace_on:
                tbuf[tlen[0]] = cdep
                tlen[0] += 1
            cur = target
    state[0] = cur
    state[1] = done
    state[2] = steps
    state[3] = maxdep
    return status, size, ints, flts, keys, N, E, last, tbuf


def run_excursions(tree: EnvTree, n: int, gen_cap: int | None = None, *,
                   horizon: int | None = None, stream: np.ndarray | None = None,
                   trace: bool = False, watch=None, record_generation: int | None = None,
                   strict: bool = False):
    """Run the walk from the root until ``n`` excursions have completed.

    ``horizon`` reflects the walk at that depth. The marginal law of the
    crossing counts at depths up to ``horizon`` is unchanged, because an
    excursion below a depth-``horizon`` vertex returns to it with
    probability one; only the deeper part of the tree is left unexplored.

    Returns the ledger; with ``trace`` also a :class:`WalkTrace`, and with
    ``watch`` or ``record_generation`` also an :class:`ExcursionRecord`.
    A replica that reaches ``gen_cap`` or exhausts the vertex budget is
    returned flagged (or raises when ``strict``).
    """
    if n < 1:
        raise ValueError("need at least one excursion")
    if gen_cap is None:
        gen_cap = 8 * max(n, horizon or 0)
    if horizon is not None and horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if stream is None:
        stream = _rng.new_stream(tree.seed, tree.replica, _rng.TAG_WALK)
    d, mean, sd = tree.kernel_params
    cap = tree.ints.shape[0]
    N = np.zeros(cap, np.int64)
    E = np.zeros(cap, np.int64)
    last = np.full(cap, -1, np.int64)
    top = (horizon if horizon is not None else gen_cap) + 2
    levels = np.zeros(top, np.int64)
    state = np.zeros(4, np.int64)
    watch_arr = np.asarray([] if watch is None else watch, dtype=np.int64)
    if watch_arr.size and watch_arr.max() >= tree.size:
        raise ValueError("watched vertices must already exist in the tree")
    watch_out = np.zeros((n if watch_arr.size else 0, watch_arr.size), np.int64)
    watch_prev = np.zeros(watch_arr.size, np.int64)
    rec = -1 if record_generation is None else int(record_generation)
    rec_out = np.zeros((n if rec >= 0 else 0, 2), np.int64)
    rec_cnt = np.zeros(2, np.int64)
    tbuf = np.zeros(1024 if trace else 0, np.int32)
    tlen = np.zeros(1, np.int64)
    status, size, ints, flts, keys, N, E, last, tbuf = _walk_kernel(
        tree.ints, tree.flts, tree.keys, tree.size, tree.vertex_budget, d, mean, sd,
        N, E, last, levels, stream, state, n, -1 if horizon is None else int(horizon), int(gen_cap),
        watch_arr, watch_out, watch_prev, rec, rec_out, rec_cnt,
        bool(trace), tbuf, tlen)
    tree.adopt(size, ints, flts, keys)
    flagged = FLAG_REASONS.get(status)
    if flagged and strict:
        if status == STATUS_BUDGET:
            raise VertexBudgetExceeded(f"vertex budget {tree.vertex_budget} exceeded")
        raise RuntimeError(f"replica flagged: {flagged}")
    ledger = EdgeLocalTimeLedger(tree, "walk", int(state[1]), N[:size].copy(), E[:size].copy(),
                                 horizon, flagged, levels)
    extras = []
    if trace:
        extras.append(WalkTrace(tbuf[: tlen[0]].copy(), int(state[2])))
    if watch is not None or record_generation is not None:
        extras.append(ExcursionRecord(watch_arr, watch_out, record_generation,
                                      rec_out if rec >= 0 else None))
    if extras:
        return (ledger, *extras)
    return ledger


def observables(ledger: EdgeLocalTimeLedger, k: int) -> tuple[int, int, int]:
    """(R_k, Z_k, L_k) with L_k = Z_k + Z_{k+1}."""
    if ledger.horizon is not None and k + 1 > ledger.horizon:
        raise ValueError(f"L_{k} needs generation {k + 1}, beyond horizon {ledger.horizon}")
    z = ledger.Z_k(k)
    return ledger.R_k(k), z, z + ledger.Z_k(k + 1)


@dataclass(frozen=True)
class ReducedRangeDiagnostic:
    """Vertices at depth >= gamma visited by two or more excursions.

    ``fraction`` is their count over the whole range size, so it is
    nonincreasing in gamma; ``fails`` is True when there is at least one.
    """

    gamma: int
    multiply_visited: int
    range_size: int
    fraction: float
    fails: bool


def reduced_range_diagnostic(ledger: EdgeLocalTimeLedger, gamma: int) -> ReducedRangeDiagnostic:
    if ledger.visits is None:
        raise ValueError("ledger does not track excursion visits (walk backend only)")
    n = len(ledger.crossings)
    depths = ledger.tree.depths[:n]
    in_range = ledger.crossings > 0
    multi = int(np.count_nonzero(in_range & (depths >= gamma) & (ledger.visits >= 2)))
    size = int(np.count_nonzero(in_range))
    return ReducedRangeDiagnostic(int(gamma), multi, size, multi / size if size else 0.0, multi > 0)


def ledger_violations(ledger: EdgeLocalTimeLedger) -> list[str]:
    """Check the exact per-path identities; returns a description of each violation."""
    out = []
    N = ledger.crossings
    tree = ledger.tree
    if N[0] != ledger.p:
        out.append(f"N_root={N[0]} but p={ledger.p}")
    parents = tree.parents[: len(N)]
    child = np.arange(1, len(N))
    # the root is always visited; its count only records finished excursions
    bad = (N[child] > 0) & (N[parents[child]] == 0) & (parents[child] != 0)
    if bad.any():
        out.append(f"{int(bad.sum())} vertices visited below an unvisited parent")
    if np.any(ledger.R > ledger.Z):
        out.append("R_k > Z_k for some k")
    if ledger.visits is not None:
        # a flagged replica may hold one unfinished excursion
        bound = ledger.p + (ledger.flagged is not None)
        if np.any(ledger.visits > np.minimum(N, bound)):
            out.append("E_x > min(N_x, p) for some x")
        if np.any((ledger.visits > 0) != (N > 0)):
            out.append("E_x and N_x disagree on visited vertices")
    if ledger.level_visits is not None and ledger.flagged is None:
        # an interrupted excursion leaves its downward crossings unmatched
        last = len(ledger.Z) - 1 if ledger.horizon is None else ledger.horizon - 1
        for k in range(last + 1):
            expected = ledger.Z_k(k) + ledger.Z_k(k + 1)
            if ledger.level_visits[k] != expected:
                out.append(f"level {k}: {ledger.level_visits[k]} visits != Z_k + Z_(k+1) = {expected}")
    return out

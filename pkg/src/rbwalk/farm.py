"""Batched replica runs of the Galton-Watson backend.

One compiled loop handles many replicas so that runs with millions of
small replicas do not pay Python overhead per replica. Replica ``r`` uses
exactly the environment and offspring streams of
``simulate_range(EnvTree(family, seed, r), ...)``, so batched and one-off
runs agree bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _rng
from ._rng import next_uniform, replica_key
from .environment import DEPTH, NCHILD, PARENT, EnvFamily, grow_vec
from .range_gw import gw_kernel
from .walk import STATUS_DONE

__all__ = ["FarmResult", "run_farm"]


@njit(cache=True, nogil=True)
def _farm_kernel(env_base, gw_base, pair_base, r0, count, d, mean, sd, budget,
                 p, max_gen, gen_cap, gens, pair_gen, thresholds,
                 out_Z, out_R, out_flag, out_lca, out_cratio, out_range):
    cap = 1024
    ints = np.zeros((cap, 4), np.int64)
    flts = np.zeros((cap, 3))
    keys = np.zeros(cap, np.uint64)
    N = np.zeros(cap, np.int64)
    st = np.zeros(1, np.uint64)
    pst = np.zeros(1, np.uint64)
    slot = np.full(max_gen + 2, -1, np.int64)
    for i in range(gens.shape[0]):
        slot[gens[i]] = i
    buf = np.zeros(64, np.int64)
    anc = np.zeros(64, np.int64)
    cnt = np.zeros(cap, np.int64)
    size = 1
    for j in range(count):
        r = r0 + j
        N[:size] = 0
        ints[0, PARENT] = -1
        ints[0, DEPTH] = 0
        ints[0, 2] = -1
        ints[0, NCHILD] = -1
        flts[0, 0] = 0.0
        flts[0, 1] = 1.0
        flts[0, 2] = 0.0
        keys[0] = replica_key(env_base, r)
        st[0] = replica_key(gw_base, r)
        status, size, ints, flts, keys, N, gen = gw_kernel(
            ints, flts, keys, 1, budget, d, mean, sd, N, st, p, max_gen, gen_cap)
        if N.shape[0] > cnt.shape[0]:
            cnt = np.zeros(N.shape[0], np.int64)
        out_flag[j] = status
        nR = 0
        for v in range(size):
            dep = ints[v, DEPTH]
            if N[v] > 0:
                if dep <= max_gen + 1 and slot[dep] >= 0:
                    out_Z[j, slot[dep]] += N[v]
                    out_R[j, slot[dep]] += 1
                if dep == pair_gen:
                    if nR == buf.shape[0]:
                        buf = grow_vec(buf, 2 * nR)
                        anc = grow_vec(anc, 2 * nR)
                    buf[nR] = v
                    nR += 1
        out_range[j] = nR
        if pair_gen < 0 or nR == 0 or status != STATUS_DONE:
            out_lca[j] = -1
            continue
        pst[0] = replica_key(pair_base, r)
        x = buf[int(next_uniform(pst) * nR)]
        y = buf[int(next_uniform(pst) * nR)]
        while x != y:
            x = ints[x, PARENT]
            y = ints[y, PARENT]
        out_lca[j] = ints[x, DEPTH]
        # all-pairs estimator: group by ancestor at each threshold, deepest first
        for i in range(nR):
            anc[i] = buf[i]
        for t in range(thresholds.shape[0]):
            level = thresholds[t]
            sumsq = 0
            for i in range(nR):
                a = anc[i]
                while ints[a, DEPTH] > level:
                    a = ints[a, PARENT]
                anc[i] = a
                sumsq += 2 * cnt[a] + 1
                cnt[a] += 1
            for i in range(nR):
                cnt[anc[i]] = 0
            out_cratio[j, t] = sumsq / (nR * nR)


@dataclass
class FarmResult:
    """Per-replica outputs of a batched run.

    ``Z[:, i]`` and ``R[:, i]`` refer to generation ``gens[i]``; ``lca[r]``
    is the coalescence depth of one uniform pair from generation
    ``pair_generation`` (-1 when that generation is empty or the replica
    was flagged); ``cratio[:, t]`` is the all-pairs fraction sharing an
    ancestor at depth ``thresholds[t]``.
    """

    seed: int
    p: int
    gens: np.ndarray
    pair_generation: int
    thresholds: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    status: np.ndarray
    lca: np.ndarray
    cratio: np.ndarray
    range_size: np.ndarray

    @property
    def flagged(self) -> np.ndarray:
        return self.status != STATUS_DONE

    @property
    def accepted(self) -> np.ndarray:
        return self.lca >= 0


def run_farm(family: EnvFamily, seed: int, p: int, replicas: int, *, gens=(),
             pair_generation: int = -1, thresholds=(), max_generation: int | None = None,
             gen_cap: int | None = None, vertex_budget: int = 10**7, threads: int = 1,
             first_replica: int = 0, chunk: int = 4096) -> FarmResult:
    """Run ``replicas`` independent GW replicas with ``p`` excursions each.

    The construction stops at ``max_generation`` (default: the deepest
    requested generation), which leaves the law of all requested
    observables unchanged.
    """
    gens = np.asarray(sorted(set(int(g) for g in gens)), dtype=np.int64)
    thr = np.asarray(sorted(set(int(t) for t in thresholds), reverse=True), dtype=np.int64)
    if pair_generation >= 0 and len(thr) and (thr.max() > pair_generation or thr.min() < 0):
        raise ValueError("thresholds must lie in [0, pair_generation]")
    deepest = max([pair_generation] + list(gens))
    if max_generation is None:
        max_generation = deepest
    if deepest > max_generation or deepest < 0:
        raise ValueError("requested generations must lie in [0, max_generation]")
    if gen_cap is None:
        gen_cap = 8 * max(p, max_generation)
    Z = np.zeros((replicas, len(gens)), np.int64)
    R = np.zeros((replicas, len(gens)), np.int64)
    status = np.zeros(replicas, np.int64)
    lca = np.full(replicas, -1, np.int64)
    cratio = np.zeros((replicas, len(thr)))
    rsize = np.zeros(replicas, np.int64)
    env_base = _rng.base_key(seed, _rng.TAG_ENV)
    gw_base = _rng.base_key(seed, _rng.TAG_GW)
    pair_base = _rng.base_key(seed, _rng.TAG_PAIR)

    def work(start):
        stop = min(replicas, start + chunk)
        _farm_kernel(env_base, gw_base, pair_base, first_replica + start, stop - start,
                     family.d, family.mean, family.sd, vertex_budget, int(p), int(max_generation),
                     int(gen_cap), gens, int(pair_generation), thr,
                     Z[start:stop], R[start:stop], status[start:stop], lca[start:stop],
                     cratio[start:stop], rsize[start:stop])

    starts = range(0, replicas, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, starts))
    else:
        for s in starts:
            work(s)
    return FarmResult(int(seed), int(p), gens, int(pair_generation), thr, Z, R, status, lca, cratio, rsize)

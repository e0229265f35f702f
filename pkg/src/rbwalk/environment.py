"""Environment families, regime checks and the lazily grown environment tree."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit
from scipy import optimize

from . import _rng
from ._rng import child_key, normal_from_key

__all__ = [
    "EnvFamily",
    "RegimeReport",
    "EnvTree",
    "VertexBudgetExceeded",
    "NonDiffusiveError",
    "FAMILIES",
    "make_family",
    "psi",
    "psi_prime",
    "kappa",
    "check_assumptions",
    "c0_for_family",
    "materialize_children",
    "conductance_H",
    "partial_W",
    "sample_generation_potentials",
]


class VertexBudgetExceeded(RuntimeError):
    """Raised when a tree would grow past its configured vertex budget."""


class NonDiffusiveError(ValueError):
    """Raised when a diffusive run is requested on a family with kappa <= 2."""


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class EnvFamily:
    """Every vertex has ``d`` children; displacements are i.i.d. Normal(mean, sigma2).

    The mean is not free: it is set to ``log d + sigma2 / 2`` so that the
    log-Laplace transform vanishes at 1.
    """

    tag: str
    d: int
    sigma2: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"offspring count d must be an integer >= 2, got {self.d}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.tag == "binary-gaussian" and self.d != 2:
            raise ValueError("binary-gaussian family requires d=2")

    @property
    def mean(self) -> float:
        return math.log(self.d) + self.sigma2 / 2.0

    @property
    def sd(self) -> float:
        return math.sqrt(self.sigma2)


def _binary_gaussian(d: int = 2, sigma2: float = 0.5) -> EnvFamily:
    return EnvFamily("binary-gaussian", 2 if d is None else int(d), float(sigma2))


def _dary_gaussian(d: int = 2, sigma2: float = 0.5) -> EnvFamily:
    return EnvFamily("d-ary-gaussian", int(d), float(sigma2))


FAMILIES: dict[str, Callable[..., EnvFamily]] = {
    "binary-gaussian": _binary_gaussian,
    "d-ary-gaussian": _dary_gaussian,
}


def make_family(tag: str = "binary-gaussian", d: int = 2, sigma2: float = 0.5) -> EnvFamily:
    try:
        factory = FAMILIES[tag]
    except KeyError:
        raise ValueError(f"unknown family {tag!r}; registered: {sorted(FAMILIES)}") from None
    return factory(d=d, sigma2=sigma2)


def psi(family: EnvFamily, t: float) -> float:
    """log E[sum over first generation of exp(-t V)]."""
    return math.log(family.d) + family.sigma2 * t * t / 2.0 - family.mean * t


def psi_prime(family: EnvFamily, t: float) -> float:
    return family.sigma2 * t - family.mean


_KAPPA_TMAX = 64.0


def kappa(family: EnvFamily) -> float:
    """Second root of psi, located by bisection on (1, 64].

    Raises ValueError when psi has no root strictly above 1 in that window.
    """
    if psi_prime(family, 1.0) >= 0.0:
        raise ValueError("no finite kappa: psi is nondecreasing at 1, no root above 1")
    res = optimize.minimize_scalar(
        lambda t: psi(family, t), bounds=(1.0, _KAPPA_TMAX), method="bounded",
        options={"xatol": 1e-12},
    )
    t_min = float(res.x)
    if psi(family, _KAPPA_TMAX) <= 0.0:
        raise ValueError(f"no finite kappa below t_max={_KAPPA_TMAX}")
    return float(optimize.bisect(lambda t: psi(family, t), t_min, _KAPPA_TMAX, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500))


def kappa_closed_form(family: EnvFamily) -> float:
    return 2.0 * math.log(family.d) / family.sigma2


def c0_for_family(family: EnvFamily) -> float:
    """E[sum over distinct first-generation pairs of exp(-V(x)-V(y))] / (1 - exp(psi(2)))."""
    p2 = psi(family, 2.0)
    if p2 >= 0.0:
        raise ValueError(f"c0 needs psi(2) < 0, got {p2}")
    mean_weight = math.exp(-family.mean + family.sigma2 / 2.0)
    numerator = family.d * (family.d - 1) * mean_weight**2
    return numerator / (1.0 - math.exp(p2))


@dataclass(frozen=True)
class RegimeReport:
    family: EnvFamily
    psi1: float
    psi_prime1: float
    psi2: float
    kappa: float
    diffusive: bool
    assumption1_ok: bool
    assumption2_ok: bool
    c0: float

    def lines(self) -> list[str]:
        return [
            f"family        {self.family.tag} (d={self.family.d}, sigma2={self.family.sigma2:g})",
            f"psi(1)        {self.psi1:.12g}",
            f"psi'(1)       {self.psi_prime1:.9f}",
            f"psi(2)        {self.psi2:.9f}",
            f"kappa         {self.kappa:.9f}",
            f"c0            {self.c0:.6f}",
            f"assumption 1  {'ok' if self.assumption1_ok else 'FAILED'}",
            f"assumption 2  {'ok' if self.assumption2_ok else 'FAILED'}",
            f"diffusive     {'yes' if self.diffusive else 'no'}",
        ]


def check_assumptions(family: EnvFamily, require_diffusive: bool = False) -> RegimeReport:
    """Evaluate psi, kappa and c0 and the standing assumptions for a family.

    Gaussian displacements with bounded offspring have psi finite everywhere
    and all moments of the first-generation weight sum, so the moment
    assumption is certified analytically. Gaussian laws are non-lattice.
    """
    p1 = psi(family, 1.0)
    dp1 = psi_prime(family, 1.0)
    p2 = psi(family, 2.0)
    try:
        kap = kappa(family)
    except ValueError:
        kap = float("nan")
    diffusive = abs(p1) <= 1e-12 and dp1 < 0.0 and kap > 2.0
    c0 = c0_for_family(family) if p2 < 0.0 else float("nan")
    report = RegimeReport(family, p1, dp1, p2, kap, bool(diffusive), True, True, c0)
    if require_diffusive and not report.diffusive:
        raise NonDiffusiveError(
            f"family {family} is not in the diffusive regime (psi'(1)={dp1:.6g}, kappa={kap:.6g})"
        )
    return report


# ---------------------------------------------------------------------------
# arena kernels
#
# ints[:, 0] parent, ints[:, 1] depth, ints[:, 2] first child, ints[:, 3] child
# count (-1 until materialized). flts[:, 0] potential V, flts[:, 1] weight of the
# vertex relative to its parent exp(-(V - V_parent)), flts[:, 2] total relative
# weight 1 + sum of children weights (valid once materialized).

PARENT, DEPTH, FIRST, NCHILD = 0, 1, 2, 3
POT, RELW, RELTOT = 0, 1, 2


@njit(cache=True, nogil=True)
def grow_rows(a, newcap):
    b = np.zeros((newcap, a.shape[1]), a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True, nogil=True)
def grow_vec(a, newcap):
    b = np.zeros(newcap, a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True, nogil=True)
def materialize_vertex(x, ints, flts, keys, size, d, mean, sd):
    first = size
    vx = flts[x, POT]
    kx = keys[x]
    dep = ints[x, DEPTH] + 1
    tot = 1.0
    for i in range(d):
        c = first + i
        ck = child_key(kx, i)
        disp = mean + sd * normal_from_key(ck)
        ints[c, PARENT] = x
        ints[c, DEPTH] = dep
        ints[c, FIRST] = -1
        ints[c, NCHILD] = -1
        flts[c, POT] = vx + disp
        rw = np.exp(-disp)
        flts[c, RELW] = rw
        flts[c, RELTOT] = 0.0
        keys[c] = ck
        tot += rw
    ints[x, FIRST] = first
    ints[x, NCHILD] = d
    flts[x, RELTOT] = tot
    return size + d


@njit(cache=True, nogil=True)
def _materialize_to_depth(ints, flts, keys, size, depth, budget, d, mean, sd):
    # breadth-first sweep over the arena; newly created vertices are appended
    # so a single forward pass reaches every vertex of depth < ``depth``
    x = 0
    while x < size:
        if ints[x, DEPTH] < depth and ints[x, NCHILD] < 0:
            if size + d > budget:
                return -1, ints, flts, keys
            if size + d > ints.shape[0]:
                cap = min(max(2 * ints.shape[0], size + d), budget)
                ints = grow_rows(ints, cap)
                flts = grow_rows(flts, cap)
                keys = grow_vec(keys, cap)
            size = materialize_vertex(x, ints, flts, keys, size, d, mean, sd)
        x += 1
    return size, ints, flts, keys


@njit(cache=True, nogil=True)
def _stream_partial_w(root_key, k, d, mean, sd):
    # depth-first over all d**k paths without storing vertices
    if k == 0:
        return 1.0
    keys = np.zeros(k + 1, np.uint64)
    pots = np.zeros(k + 1)
    nxt = np.zeros(k + 1, np.int64)
    keys[0] = root_key
    level = 0
    total = 0.0
    while level >= 0:
        if nxt[level] == d:
            nxt[level] = 0
            level -= 1
            continue
        i = nxt[level]
        nxt[level] += 1
        ck = child_key(keys[level], i)
        v = pots[level] + mean + sd * normal_from_key(ck)
        if level + 1 == k:
            total += np.exp(-v)
        else:
            level += 1
            keys[level] = ck
            pots[level] = v
    return total


# ---------------------------------------------------------------------------
# environment tree


class EnvTree:
    """Lazily grown environment tree stored in flat arrays.

    Vertex 0 is the root ``e`` with potential 0; index -1 stands for the
    virtual parent ``e*``. Children of a vertex occupy a contiguous block.
    A tree built from a family draws every displacement from a hash of the
    vertex's path key, so equal ``(seed, replica)`` give identical trees
    regardless of the order in which vertices are materialized.
    """

    def __init__(self, family: EnvFamily | None, seed: int = 0, replica: int = 0,
                 vertex_budget: int = 10**7, capacity: int = 64):
        self.family = family
        self.seed = int(seed)
        self.replica = int(replica)
        self.vertex_budget = int(vertex_budget)
        cap = max(1, min(capacity, self.vertex_budget))
        self.ints = np.zeros((cap, 4), np.int64)
        self.flts = np.zeros((cap, 3), np.float64)
        self.keys = np.zeros(cap, np.uint64)
        self.ints[0] = (-1, 0, -1, -1)
        self.flts[0] = (0.0, 1.0, 0.0)
        if family is not None:
            self.keys[0] = _rng.replica_key(_rng.base_key(seed, _rng.TAG_ENV), replica)
        self.size = 1

    # -- construction from explicit data ---------------------------------
    @classmethod
    def from_edges(cls, parents, potentials) -> "EnvTree":
        """Finite hand-built tree; vertices must be listed parent-first with
        each vertex's children contiguous. Every listed vertex counts as
        materialized, so vertices without listed children are leaves."""
        parents = [int(p) for p in parents]
        potentials = [float(v) for v in potentials]
        n = len(parents)
        if n == 0 or parents[0] != -1 or len(potentials) != n:
            raise ValueError("need parents[0] == -1 and one potential per vertex")
        if potentials[0] != 0.0:
            raise ValueError("root potential must be 0")
        tree = cls(None, vertex_budget=max(n, 1), capacity=n)
        ints, flts = tree.ints, tree.flts
        for v in range(1, n):
            p = parents[v]
            if not 0 <= p < v:
                raise ValueError(f"vertex {v}: parent {p} must precede it")
        children: dict[int, list[int]] = {v: [] for v in range(n)}
        for v in range(1, n):
            children[parents[v]].append(v)
        for v in range(n):
            kids = children[v]
            if kids and kids != list(range(kids[0], kids[0] + len(kids))):
                raise ValueError(f"children of vertex {v} are not contiguous: {kids}")
            ints[v, PARENT] = parents[v]
            ints[v, DEPTH] = 0 if v == 0 else ints[parents[v], DEPTH] + 1
            ints[v, FIRST] = kids[0] if kids else -1
            ints[v, NCHILD] = len(kids)
            flts[v, POT] = potentials[v]
            flts[v, RELW] = 1.0 if v == 0 else math.exp(-(potentials[v] - potentials[parents[v]]))
        for v in range(n):
            flts[v, RELTOT] = 1.0 + sum(flts[c, RELW] for c in children[v])
        tree.size = n
        return tree

    # -- accessors -------------------------------------------------------
    @property
    def parents(self) -> np.ndarray:
        return self.ints[: self.size, PARENT]

    @property
    def depths(self) -> np.ndarray:
        return self.ints[: self.size, DEPTH]

    @property
    def potentials(self) -> np.ndarray:
        return self.flts[: self.size, POT]

    def parent(self, x: int) -> int:
        return int(self.ints[x, PARENT])

    def depth(self, x: int) -> int:
        return int(self.ints[x, DEPTH])

    def V(self, x: int) -> float:
        return float(self.flts[x, POT])

    def is_materialized(self, x: int) -> bool:
        return bool(self.ints[x, NCHILD] >= 0)

    def children(self, x: int) -> list[int]:
        """Children of ``x``, materializing them if needed."""
        self.materialize(x)
        first, nch = int(self.ints[x, FIRST]), int(self.ints[x, NCHILD])
        return list(range(first, first + nch)) if nch > 0 else []

    def ancestors(self, x: int) -> list[int]:
        """Path from the root to ``x`` inclusive."""
        path = []
        while x >= 0:
            path.append(x)
            x = int(self.ints[x, PARENT])
        return path[::-1]

    def is_ancestor(self, u: int, x: int) -> bool:
        du = self.depth(u)
        while self.depth(x) > du:
            x = self.parent(x)
        return x == u

    def vertices_at_depth(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.depths == k)

    # -- growth ----------------------------------------------------------
    def _check_vertex(self, x: int):
        if not 0 <= x < self.size:
            raise IndexError(f"vertex {x} not in tree of size {self.size}")

    def reserve(self, capacity: int):
        if capacity <= self.ints.shape[0]:
            return
        if capacity > self.vertex_budget:
            raise VertexBudgetExceeded(f"vertex budget {self.vertex_budget} exceeded")
        self.ints = grow_rows(self.ints, capacity)
        self.flts = grow_rows(self.flts, capacity)
        self.keys = grow_vec(self.keys, capacity)

    def adopt(self, size, ints, flts, keys):
        """Take back arrays returned (possibly reallocated) by a kernel."""
        self.size = int(size)
        self.ints, self.flts, self.keys = ints, flts, keys

    def materialize(self, x: int):
        self._check_vertex(x)
        if self.ints[x, NCHILD] >= 0:
            return
        if self.family is None:
            raise ValueError("hand-built trees cannot grow")
        f = self.family
        need = self.size + f.d
        if need > self.vertex_budget:
            raise VertexBudgetExceeded(f"vertex budget {self.vertex_budget} exceeded")
        self.reserve(min(max(need, 2 * self.ints.shape[0]), self.vertex_budget))
        self.size = materialize_vertex(x, self.ints, self.flts, self.keys, self.size,
                                       f.d, f.mean, f.sd)

    def materialize_to_depth(self, depth: int):
        """Materialize children of every vertex shallower than ``depth``."""
        if self.family is None:
            return
        f = self.family
        size, ints, flts, keys = _materialize_to_depth(
            self.ints, self.flts, self.keys, self.size, int(depth), self.vertex_budget,
            f.d, f.mean, f.sd)
        if size < 0:
            raise VertexBudgetExceeded(f"vertex budget {self.vertex_budget} exceeded")
        self.adopt(size, ints, flts, keys)

    @property
    def kernel_params(self) -> tuple[int, float, float]:
        """(d, mean, sd) as passed to kernels; d=0 marks a hand-built tree."""
        if self.family is None:
            return 0, 0.0, 0.0
        return self.family.d, self.family.mean, self.family.sd


def materialize_children(tree: EnvTree, vertex: int) -> list[tuple[int, float]]:
    """Children of ``vertex`` with their potentials; idempotent."""
    return [(c, tree.V(c)) for c in tree.children(vertex)]


def conductance_H(tree: EnvTree, u: int, x: int) -> float:
    """Sum over the path u <= w <= x of exp(V(w) - V(x))."""
    if not tree.is_ancestor(u, x):
        raise ValueError(f"{u} is not an ancestor of {x}")
    vx = tree.V(x)
    total = 0.0
    w = x
    while True:
        total += math.exp(tree.V(w) - vx)
        if w == u:
            return total
        w = tree.parent(w)


def partial_W(tree: EnvTree, k: int) -> float:
    """W_k = sum over generation k of exp(-V(x)).

    For family trees the generation is enumerated depth-first from the
    hashed keys without storing it, so the answer equals what full
    materialization would give; the vertex budget still bounds the work.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if tree.family is None:
        shallow = tree.depths < k
        if np.any(tree.ints[: tree.size, NCHILD][shallow] < 0):
            raise ValueError("hand-built tree is not materialized to the requested depth")
        return float(np.exp(-tree.potentials[tree.depths == k]).sum())
    d = tree.family.d
    if (d ** (k + 1) - 1) // (d - 1) > tree.vertex_budget:
        raise VertexBudgetExceeded(f"generation {k} needs more than {tree.vertex_budget} vertices")
    return float(_stream_partial_w(tree.keys[0], int(k), d, tree.family.mean, tree.family.sd))


def sample_generation_potentials(family: EnvFamily, m: int, size: int,
                                 rng: np.random.Generator) -> np.ndarray:
    """Potentials of all ``d**m`` generation-m vertices for ``size`` independent trees.

    Columns follow lexicographic path order, so the descendants of a
    generation-j vertex form a contiguous block of ``d**(m-j)`` columns.
    """
    v = np.zeros((size, 1))
    for _ in range(m):
        v = np.repeat(v, family.d, axis=1)
        v += rng.normal(family.mean, family.sd, size=v.shape)
    return v

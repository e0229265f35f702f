"""End-to-end acceptance criteria 1-12.

Each test prints one PASS/FAIL line (visible even without ``-s``) and then
asserts the same verdict. Tolerances, replica counts and runtimes are the
fixed acceptance budgets; statistical tests use significance 0.001 and
rerun once with fresh randomness on rejection.
"""

import math
import time

import numpy as np
import pytest

from rbwalk import _rng
from rbwalk.environment import (
    EnvTree, c0_for_family, check_assumptions, kappa, make_family, psi, psi_prime,
)
from rbwalk.farm import run_farm
from rbwalk.genealogy import estimate_from_farm
from rbwalk.limit_laws import (
    CoalescentParams, feller_laplace, feller_step, polya_aeppli_pmf, polya_aeppli_sample,
    ratio_moment_exact, ratio_moment_mc, recent_past_limit_mc, recent_past_limit_series,
    remote_past_limit_integral, remote_past_limit_mc, single_excursion_limit, volume_limit_laplace,
)
from rbwalk.manytoone import estimate_cinf, sample_winf
from rbwalk.range_gw import quenched_edge_moments, simulate_range
from rbwalk.stats import chi_square_gof, chi_square_two_sample, ks_two_sample, passes_with_retry
from rbwalk.walk import alpha_beta, ledger_violations, run_excursions

from conftest import mean_se

pytestmark = pytest.mark.acceptance

ALPHA = 0.001


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def fam():
    return make_family("binary-gaussian", d=2, sigma2=0.5)


@pytest.fixture(scope="module")
def c0(fam):
    return c0_for_family(fam)


@pytest.fixture(scope="module")
def pool(fam):
    return sample_winf(fam, 30, 100_000, np.random.default_rng(7))


def test_c01_regime_checker(capsys, fam):
    t0 = time.perf_counter()
    report = check_assumptions(fam, require_diffusive=True)
    elapsed = time.perf_counter() - t0
    # the quoted psi'(1) and kappa are 6-decimal roundings of 1/4 - log 2 and 4 log 2;
    # the 1e-9 tolerance applies to those closed forms
    dpsi, kap = psi_prime(fam, 1.0), kappa(fam)
    checks = {
        "psi(1)": abs(psi(fam, 1.0)) <= 1e-12 and abs(report.psi1) <= 1e-12,
        "psi'(1)": abs(dpsi - (0.25 - math.log(2))) <= 1e-9 and round(dpsi, 6) == -0.443147,
        "kappa": abs(kap - 4 * math.log(2)) <= 1e-9 and round(kap, 6) == 2.772589,
        "c0": abs(report.c0 - 2.84675) <= 1e-4,
        "runtime": elapsed < 1.0,
    }
    ok = all(checks.values())
    verdict(capsys, 1, ok, f"psi'(1)={report.psi_prime1:.9f} kappa={report.kappa:.9f} c0={report.c0:.6f} "
                           f"t={elapsed:.3f}s failed={[k for k, v in checks.items() if not v]}")


def test_c02_ledger_identities(capsys, fam):
    p, replicas = 10, 10_000
    bad = {"walk": 0, "gw": 0}
    for r in range(replicas):
        walk = run_excursions(EnvTree(fam, seed=202, replica=r), p)
        gw = simulate_range(EnvTree(fam, seed=203, replica=r), p)
        for name, led in (("walk", walk), ("gw", gw)):
            # root count, descendant-zero, R_k <= Z_k, and on the walk side the
            # per-level visit counts against L_k = Z_k + Z_(k+1)
            bad[name] += bool(ledger_violations(led))
    ok = bad["walk"] == 0 and bad["gw"] == 0
    verdict(capsys, 2, ok, f"violating replicas walk={bad['walk']} gw={bad['gw']} of {replicas} each")


def mixture_pmf(alpha, beta, top):
    j = np.arange(1, top + 1)
    return np.concatenate([[1 - alpha], alpha * beta * (1 - beta) ** (j - 1)])


def test_c03_quenched_edge_law(capsys, depth2_tree):
    t0 = time.perf_counter()
    verts = [1, 2, 3, 4, 5, 6]
    excursions = 100_000

    def sample(attempt):
        stream = _rng.new_stream(303, attempt, _rng.TAG_WALK)
        _, rec = run_excursions(depth2_tree, excursions, watch=verts, stream=stream)
        return rec.watched.astype(float)

    first = sample(0)
    fails = []
    for i, x in enumerate(verts):
        alpha, beta = alpha_beta(depth2_tree, x)

        def pval(attempt, i=i):
            counts = np.bincount((first if attempt == 0 else sample(1))[:, i].astype(np.int64))
            return chi_square_gof(counts, mixture_pmf(alpha, beta, len(counts) - 1))

        ok_x, pv = passes_with_retry(pval, ALPHA)
        if not ok_x:
            fails.append(f"chi2 x={x} p={pv}")
        m, se = mean_se(first[:, i])
        if abs(m - math.exp(-depth2_tree.V(x))) > 3 * se:
            fails.append(f"E[N_{x}]")
    for x, y in ((1, 2), (3, 4), (3, 6), (5, 6)):
        nx, ny = first[:, verts.index(x)], first[:, verts.index(y)]
        second, joint, hit = quenched_edge_moments(depth2_tree, x, y)
        for label, s, target in (("sq", nx**2, second), ("joint", nx * ny, joint), ("hit", nx * (ny >= 1), hit)):
            m, se = mean_se(s)
            if abs(m - target) > 3 * se:
                fails.append(f"{label}({x},{y}) {m:.4f} vs {target:.4f}")
    elapsed = time.perf_counter() - t0
    ok = not fails and elapsed < 60
    verdict(capsys, 3, ok, f"{excursions} excursions, t={elapsed:.1f}s, failures={fails}")


def test_c04_backend_equivalence(capsys, fam):
    t0 = time.perf_counter()
    tree = EnvTree(fam, seed=404)
    tree.materialize_to_depth(6)
    replicas, pvals = 100_000, []
    for s in range(5):
        _, rec = run_excursions(tree, replicas, horizon=6, record_generation=3,
                                stream=_rng.new_stream(4040 + s, 0, _rng.TAG_WALK))
        walk = rec.generation_counts
        stream = _rng.new_stream(4040 + s, 0, _rng.TAG_GW)
        gw = np.empty((replicas, 2), np.int64)
        for i in range(replicas):
            led = simulate_range(tree, 1, max_generation=3, stream=stream)
            gw[i] = (led.Z_k(3), led.R_k(3))
        # joint (Z, R) cells encoded as one integer label
        pvals.append(chi_square_two_sample(walk[:, 0] * 100_000 + walk[:, 1], gw[:, 0] * 100_000 + gw[:, 1]))
    elapsed = time.perf_counter() - t0
    passed = sum(p > ALPHA for p in pvals)
    ok = passed >= 4 and elapsed < 300
    verdict(capsys, 4, ok, f"p-values {[round(p, 4) for p in pvals]}, {passed}/5 pass, t={elapsed:.0f}s")


def test_c05_martingale(capsys, fam):
    n = 100
    gens = [1, n // 4, n // 2]
    res = run_farm(fam, 505, n, 10_000, gens=gens)
    parts, ok = [], True
    for i, k in enumerate(gens):
        m, se = mean_se(res.Z[:, i] / n)
        ok &= abs(m - 1) <= 3 * se
        parts.append(f"k={k}: {m:.4f}+-{se:.4f}")
    verdict(capsys, 5, bool(ok), "; ".join(parts) + f"; flagged={int(res.flagged.sum())}")


def test_c06_feller_sampler(capsys, c0):
    rng = np.random.default_rng(606)
    y, dt, steps = 1.5, 0.2, 1_000_000
    out = feller_step(rng, np.full(steps, y), dt, c0)
    fails = []
    m, se = mean_se(out)
    if abs(m - y) > 3 * se:
        fails.append("mean")
    v, vse = mean_se((out - y) ** 2)
    if abs(v - 2 * c0 * dt * y) > 3 * vse:
        fails.append("variance")

    def ck(attempt):
        r = np.random.default_rng(6060 + attempt)
        start = np.full(200_000, 1.0)
        two = feller_step(r, feller_step(r, start, 0.1, c0), 0.25, c0)
        return ks_two_sample(two, feller_step(r, start, 0.35, c0))[1]

    ck_ok, ck_p = passes_with_retry(ck, ALPHA)
    if not ck_ok:
        fails.append(f"chapman-kolmogorov p={ck_p}")
    for lam in (0.5, 1.0, 2.0):
        lm, lse = mean_se(np.exp(-lam * out))
        if abs(lm - feller_laplace(lam, y, dt, c0)) > 3 * lse:
            fails.append(f"laplace {lam}")
    verdict(capsys, 6, not fails, f"mean={m:.5f} var={v:.5f} (2c0*dt*y={2 * c0 * dt * y:.5f}) "
                                   f"KS p={ck_p[-1]:.3g} failures={fails}")


def test_c07_ratio_identity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(707)
    parts, ok = [], True
    for ell in (1, 2, 5, 10):
        est = ratio_moment_mc(rng, ell, 1_000_000)
        target = 2 / (ell + 1)
        assert ratio_moment_exact(ell) == pytest.approx(target, rel=1e-15)
        ok &= abs(est.value - target) <= 3 * est.se
        parts.append(f"l={ell}: {est.value:.5f} vs {target:.5f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    verdict(capsys, 7, bool(ok), "; ".join(parts) + f"; t={elapsed:.1f}s")


def test_c08_polya_aeppli(capsys, c0):
    params = CoalescentParams(0.2, 0.5, c0, 2.0)

    def gof(attempt):
        draws = polya_aeppli_sample(np.random.default_rng(808 + attempt), params, size=200_000)
        top = int(draws.max())
        pmf = np.array([polya_aeppli_pmf(ell, params) for ell in range(top + 1)])
        return chi_square_gof(np.bincount(draws, minlength=top + 1), pmf)

    gof_ok, pv = passes_with_retry(gof, ALPHA)
    deviations = []
    for w in (0.5, 2.0, 8.0):
        p = CoalescentParams(0.25, 0.5, c0, w)
        deviations.append(abs(math.fsum(polya_aeppli_pmf(ell, p) for ell in range(201)) - 1.0))
    ok = gof_ok and max(deviations) <= 1e-10
    verdict(capsys, 8, ok, f"chi2 p={pv}, max normalization deviation={max(deviations):.2e}")


def test_c09_volume_limit(capsys, fam, c0, pool):
    n, a = 200, 0.25
    k = math.floor(a * n)
    res = run_farm(fam, 909, n, 10_000, gens=[k, k + 1])
    keep = ~res.flagged
    z, z_next, r = res.Z[keep, 0] / n, res.Z[keep, 1] / n, res.R[keep, 0] / n
    cinf = estimate_cinf(fam, R=100_000, rng=np.random.default_rng(9))
    fails, parts = [], []
    for theta in (0.5, 1.0, 2.0):
        emp = float(np.exp(-theta * z).mean())
        lim = volume_limit_laplace(theta, a, c0, pool)
        parts.append(f"theta={theta}: {emp:.4f} vs {lim:.4f}")
        if abs(emp - lim) > 0.03:
            fails.append(f"laplace theta={theta} off by {abs(emp - lim):.4f}")
    mz = z.mean()
    r_gap = abs(r.mean() - cinf.value * mz) / mz
    l_gap = abs((z + z_next).mean() - 2 * mz) / mz
    if r_gap > 0.05:
        fails.append(f"R ratio gap {r_gap:.4f}")
    if l_gap > 0.03:
        fails.append(f"L ratio gap {l_gap:.4f}")
    verdict(capsys, 9, not fails, "; ".join(parts) + f"; c_inf={cinf.value:.4f} R gap={r_gap:.4f} "
                                                        f"L gap={l_gap:.4f}; failures={fails}")


def test_c10_single_excursion_genealogy(capsys, fam):
    n, a, b = 300, 0.25, 0.5
    k, t = math.floor(b * n), math.floor(a * n)
    res = run_farm(fam, 11, 1, 2_000_000, pair_generation=k, thresholds=[t])
    est = estimate_from_farm(res, [t])
    target = single_excursion_limit(a, b)
    ok = est.accepted >= 5000 and abs(est.tail_at(t) - target) <= 0.05
    verdict(capsys, 10, ok, f"tail={est.tail_at(t):.4f} vs {target:.6f}, accepted={est.accepted}")


def test_c11_many_excursion_genealogy(capsys, fam, c0, pool):
    a, b, m = 0.25, 0.5, 2
    tail_lim = recent_past_limit_mc(a, b, c0, pool, np.random.default_rng(1111))
    head_lim = remote_past_limit_mc(m, b, c0, fam, 100_000, pool, np.random.default_rng(1112))
    gaps, parts, fails = {}, [], []
    for n in (100, 200):
        k, t = math.floor(b * n), math.floor(a * n)
        res = run_farm(fam, 5, n, 20_000, pair_generation=k, thresholds=[t, m])
        est = estimate_from_farm(res, [t, m])
        gaps[n] = (abs(est.tail_at(t) - tail_lim.value), abs(est.head_at(m) - head_lim.value))
        parts.append(f"n={n}: tail={est.tail_at(t):.4f} head={est.head_at(m):.4f} accepted={est.accepted}")
        if gaps[n][0] > 0.05:
            fails.append(f"tail n={n}")
        if gaps[n][1] > 0.07:
            fails.append(f"head n={n}")
    for i, kind in enumerate(("tail", "head")):
        if gaps[200][i] > gaps[100][i] + 0.02:
            fails.append(f"{kind} trend")
    verdict(capsys, 11, not fails, "; ".join(parts) + f"; limits tail={tail_lim.value:.4f} "
                                                         f"head={head_lim.value:.4f}; failures={fails}")


def test_c12_evaluator_cross_checks(capsys, fam, c0, pool):
    b = 0.5
    mc = recent_past_limit_mc(0.25, b, c0, pool, np.random.default_rng(1201))
    series = recent_past_limit_series(0.25, b, c0, pool)
    remote = remote_past_limit_mc(2, b, c0, fam, 100_000, pool, np.random.default_rng(1202))
    integral = remote_past_limit_integral(2, b, c0, fam, 100_000, pool, np.random.default_rng(1203))
    tail_small = recent_past_limit_mc(0.01 * b, b, c0, pool, np.random.default_rng(1204))
    head_far = remote_past_limit_mc(12, b, c0, fam, 20_000, pool, np.random.default_rng(1205))
    total = tail_small.value + head_far.value
    gaps = (abs(series.value - mc.value), abs(integral.value - remote.value), abs(total - 1.0))
    ok = gaps[0] <= 0.02 and gaps[1] <= 0.02 and gaps[2] <= 0.03
    verdict(capsys, 12, ok, f"series {series.value:.4f} vs MC {mc.value:.4f}; integral {integral.value:.4f} "
                            f"vs MC {remote.value:.4f}; complementarity sum {total:.4f}")

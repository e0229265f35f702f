"""Batch experiment driver.

Each subcommand reads a flat ``key=value`` config file (``#`` starts a
comment); ``--key value`` flags override file entries. Outputs land in
``out_dir``.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _rng
from .environment import EnvTree, NonDiffusiveError, c0_for_family, check_assumptions, make_family
from .farm import run_farm
from .genealogy import InsufficientReplicas, coalescence_estimates, estimate_from_farm
from .limit_laws import (
    CoalescentParams, feller_laplace, feller_step, polya_aeppli_pmf, ratio_moment_exact,
    ratio_moment_mc, recent_past_limit_mc, recent_past_limit_series, remote_past_limit_integral,
    remote_past_limit_mc, single_excursion_limit,
)
from .manytoone import build_context
from .walk import observables, run_excursions

__all__ = ["ConfigError", "Config", "parse_config", "load_config", "main",
           "cmd_env_check", "cmd_simulate", "cmd_genealogy", "cmd_limits"]


class ConfigError(ValueError):
    """Malformed, unknown or missing configuration entries."""


_SCHEMA = {
    "family": str, "d": int, "sigma2": float, "n": int, "p": int, "b": float, "a": float,
    "m": int, "replicas": int, "seed": int, "backend": str, "gen_cap": int,
    "vertex_budget": int, "winf_depth": int, "cinf_truncation": int, "out_dir": str,
}
_DEFAULTS = {
    "family": "binary-gaussian", "d": 2, "sigma2": 0.5, "backend": "gw", "vertex_budget": 10**7,
    "winf_depth": 30, "out_dir": ".", "a": 0.25, "b": 0.5, "m": 2,
}
_REQUIRED = {
    "env-check": ("family",),
    "simulate": ("family", "n", "replicas", "seed"),
    "genealogy": ("family", "n", "replicas", "seed"),
    "limits": ("family", "seed"),
}


@dataclass
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value):
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _SCHEMA[key](value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config(command: str, path: str | None, overrides: dict) -> Config:
    given = parse_config(Path(path).read_text(encoding="utf-8")) if path else {}
    given.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    missing = [k for k in _REQUIRED[command] if k not in given]
    if missing:
        raise ConfigError(f"{command}: missing config key(s): {', '.join(missing)}")
    values = dict(_DEFAULTS)
    values.update(given)
    if values["backend"] not in ("walk", "gw"):
        raise ConfigError("backend must be 'walk' or 'gw'")
    return Config(values)


def _family(cfg: Config):
    return make_family(cfg["family"], d=cfg["d"], sigma2=cfg["sigma2"])


def _rng_for(cfg: Config, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(100 + purpose,)))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def cmd_env_check(cfg: Config, require_diffusive: bool = False) -> int:
    fam = _family(cfg)
    try:
        report = check_assumptions(fam, require_diffusive=require_diffusive)
    except NonDiffusiveError as exc:
        for line in check_assumptions(fam).lines():
            print(line)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for line in report.lines():
        print(line)
    return 0


def _excursions(cfg: Config) -> int:
    return cfg.get("p", cfg["n"])


def cmd_simulate(cfg: Config, threads: int = 1) -> Path:
    """CSV with one row per (replica, generation k) for k = 0..n."""
    fam = _family(cfg)
    n, p, reps = cfg["n"], _excursions(cfg), cfg["replicas"]
    gen_cap = cfg.get("gen_cap")
    rows = []
    if cfg["backend"] == "gw":
        res = run_farm(fam, cfg["seed"], p, reps, gens=range(n + 2), max_generation=n + 1,
                       gen_cap=gen_cap, vertex_budget=cfg["vertex_budget"], threads=threads)
        for r in range(reps):
            flag = "" if res.status[r] == 0 else "flagged"
            for k in range(n + 1):
                z = int(res.Z[r, k])
                rows.append((r, "gw", n, k, int(res.R[r, k]), z, z + int(res.Z[r, k + 1]), flag))
    else:
        for r in range(reps):
            tree = EnvTree(fam, cfg["seed"], r, vertex_budget=cfg["vertex_budget"])
            led = run_excursions(tree, p, gen_cap, horizon=n + 1)
            flag = led.flagged or ""
            for k in range(n + 1):
                R, Z, L = observables(led, k)
                rows.append((r, "walk", n, k, R, Z, L, flag))
    path = Path(cfg["out_dir"]) / "simulate.csv"
    _write_csv(path, ("replica", "backend", "n", "k", "R_k", "Z_k", "L_k", "flagged"), rows)
    return path


def _walk_ledgers(fam, cfg, p, k):
    for r in range(cfg["replicas"]):
        tree = EnvTree(fam, cfg["seed"], r, vertex_budget=cfg["vertex_budget"])
        led = run_excursions(tree, p, cfg.get("gen_cap"), horizon=k)
        if not led.flagged:
            yield led


def cmd_genealogy(cfg: Config, threads: int = 1) -> tuple[Path, Path]:
    """Coalescence estimates at generation floor(b n) plus an SVG of the tail curve."""
    fam = _family(cfg)
    n, p, a, b, m = cfg["n"], _excursions(cfg), cfg["a"], cfg["b"], cfg["m"]
    k = math.floor(b * n)
    ta = math.floor(a * n)
    if k < 1 or not 0 < a < b:
        raise ConfigError("need 0 < a < b and floor(b n) >= 1")
    grid = sorted({t for t in np.linspace(0, k, min(k, 20) + 1).astype(int)} | {ta, min(m, k)})
    if cfg["backend"] == "gw":
        res = run_farm(fam, cfg["seed"], p, cfg["replicas"], pair_generation=k,
                       gen_cap=cfg.get("gen_cap"), vertex_budget=cfg["vertex_budget"], threads=threads)
        est = estimate_from_farm(res, grid)
    else:
        pair_rng = np.random.default_rng(_rng.base_key(cfg["seed"], _rng.TAG_PAIR))
        est = coalescence_estimates(_walk_ledgers(fam, cfg, p, k), k, grid, pair_rng)
    c0 = c0_for_family(fam)
    curve_t = np.linspace(max(1, k / 50), k - 1e-9, 60)
    if p == 1:
        est.theory[("tail", ta)] = (single_excursion_limit(a, b), 0.0)
        curve = [single_excursion_limit(t / n, b) for t in curve_t]
    else:
        ctx = build_context(fam, _rng_for(cfg, 1), winf_depth=cfg["winf_depth"],
                            cinf_truncation=cfg.get("cinf_truncation"))
        tail = recent_past_limit_mc(a, b, c0, ctx.pool, _rng_for(cfg, 2))
        head = remote_past_limit_mc(m, b, c0, fam, 100_000, ctx.pool, _rng_for(cfg, 3))
        est.theory[("tail", ta)] = (tail.value, tail.se)
        est.theory[("head", min(m, k))] = (head.value, head.se)
        with warnings.catch_warnings():
            # the curve is cosmetic; near t = k the series converges slowly
            warnings.simplefilter("ignore", RuntimeWarning)
            curve = [recent_past_limit_series(t / n, b, c0, ctx.pool, K_max=200).value for t in curve_t]
    out = Path(cfg["out_dir"])
    csv_path = out / "genealogy.csv"
    _write_csv(csv_path, ("n", "p", "k", "threshold", "kind", "estimate", "ci_lo", "ci_hi",
                          "theory", "theory_se", "accepted", "rejected"), est.rows(n, p))
    svg_path = out / "genealogy.svg"
    _plot_tail(svg_path, est, curve_t, curve, n, p)
    return csv_path, svg_path


def _plot_tail(path: Path, est, curve_t, curve, n, p) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rbwalk"
    fig, ax = plt.subplots(figsize=(6, 4))
    t = est.thresholds
    err = np.vstack([est.tail - est.tail_ci[:, 0], est.tail_ci[:, 1] - est.tail])
    ax.errorbar(t, est.tail, yerr=err, fmt="o", ms=3, capsize=2, label="empirical (Wilson 95%)")
    ax.plot(curve_t, curve, "-", label="limit")
    ax.set_xlabel("threshold t")
    ax.set_ylabel("P(lca depth >= t | nonempty)")
    ax.set_title(f"n={n}, p={p}, generation {est.generation}")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_limits(cfg: Config) -> Path:
    """Cross-check rows: (suite, parameter, estimate, se, theory, theory_se)."""
    fam = _family(cfg)
    a, b, m = cfg["a"], cfg["b"], cfg["m"]
    reps = cfg.get("replicas", 100_000)
    c0 = c0_for_family(fam)
    rows = []
    rng = _rng_for(cfg, 10)
    for ell in (1, 2, 5, 10):
        est = ratio_moment_mc(rng, ell, reps)
        rows.append(("ratio", f"ell={ell}", est.value, est.se, ratio_moment_exact(ell), 0.0))
    y, dt = 1.0, 0.1
    ys = feller_step(rng, np.full(reps, y), dt, c0)
    rows.append(("feller_mean", f"y={y},delta={dt}", float(ys.mean()), float(ys.std(ddof=1) / math.sqrt(reps)), y, 0.0))
    rows.append(("feller_variance", f"y={y},delta={dt}", float(ys.var(ddof=1)),
                 float(np.std((ys - ys.mean()) ** 2, ddof=1) / math.sqrt(reps)), 2 * c0 * dt * y, 0.0))
    for lam in (0.5, 1.0, 2.0):
        e = np.exp(-lam * ys)
        rows.append(("feller_laplace", f"lambda={lam}", float(e.mean()), float(e.std(ddof=1) / math.sqrt(reps)),
                     float(feller_laplace(lam, y, dt, c0)), 0.0))
    params = CoalescentParams(a, b, c0, 1.0)
    total = sum(polya_aeppli_pmf(ell, params) for ell in range(201))
    rows.append(("polya_aeppli_normalization", "w=1,truncation=200", total, 0.0, 1.0, 0.0))
    ctx = build_context(fam, _rng_for(cfg, 1), winf_depth=cfg["winf_depth"],
                        cinf_truncation=cfg.get("cinf_truncation"))
    rows.append(("c_inf", "", ctx.c_inf, ctx.c_inf_se, math.nan, math.nan))
    mc = recent_past_limit_mc(a, b, c0, ctx.pool, _rng_for(cfg, 2), samples=max(reps, 100_000))
    ser = recent_past_limit_series(a, b, c0, ctx.pool)
    rows.append(("recent_past_series_vs_mc", f"a={a},b={b}", ser.value, ser.tail_bound, mc.value, mc.se))
    rem = remote_past_limit_mc(m, b, c0, fam, reps, ctx.pool, _rng_for(cfg, 3))
    integ = remote_past_limit_integral(m, b, c0, fam, reps, ctx.pool, _rng_for(cfg, 4))
    rows.append(("remote_past_integral_vs_mc", f"m={m},b={b}", integ.value, integ.se, rem.value, rem.se))
    m_far = 12
    tail_small = recent_past_limit_mc(0.01 * b, b, c0, ctx.pool, _rng_for(cfg, 5), samples=max(reps, 100_000))
    head_far = remote_past_limit_mc(m_far, b, c0, fam, min(reps, 20_000), ctx.pool, _rng_for(cfg, 6))
    rows.append(("complementarity", f"a={0.01 * b:g},m={m_far}", tail_small.value + head_far.value,
                 math.hypot(tail_small.se, head_far.se), 1.0, 0.0))
    path = Path(cfg["out_dir"]) / "limits.csv"
    _write_csv(path, ("suite", "parameter", "estimate", "se", "theory", "theory_se"), rows)
    return path


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbwalk", description="Biased random walk range and genealogy experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _REQUIRED:
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs="?", help="key=value config file")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--require-diffusive", action="store_true")
        for key in _SCHEMA:
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return ap


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    overrides = {k: getattr(args, k) for k in _SCHEMA}
    try:
        cfg = load_config(args.command, args.config, overrides)
        if args.command == "env-check":
            return cmd_env_check(cfg, args.require_diffusive)
        if args.require_diffusive:
            check_assumptions(_family(cfg), require_diffusive=True)
        if args.command == "simulate":
            print(cmd_simulate(cfg, args.threads))
        elif args.command == "genealogy":
            for path in cmd_genealogy(cfg, args.threads):
                print(path)
        else:
            print(cmd_limits(cfg))
    except ConfigError as exc:
        ap.print_usage(sys.stderr)
        print(f"rbwalk: error: {exc}", file=sys.stderr)
        return 2
    except NonDiffusiveError as exc:
        print(f"rbwalk: error: {exc}", file=sys.stderr)
        return 1
    except InsufficientReplicas as exc:
        print(f"rbwalk: error: {exc}", file=sys.stderr)
        return 3
    return 0

"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal
summary.  Criterion 8 is report-level: an unmet outcome is recorded as FAIL
and marked xfail rather than failing the run.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cascade_lab.cli import main as cli_main
from cascade_lab.covers_cutoffs import build_cover, build_cutoff, integral_profile, two_grid_probe, verify_cutoff
from cascade_lab.ensemble_analysis import element_cutoffs, lemma_sandwich_check, locality_report
from cascade_lab.flux_engine import (
    dimensionalize,
    flux_component,
    flux_total_energy,
    ibp_identities,
    jensen_sides,
    nondimensionalize,
    scale_diagnostics,
    stretching_identity,
)
from cascade_lab.covers_cutoffs import integral_cutoff
from cascade_lab.grid_fields import (
    FieldSeries,
    Grid,
    PhysParams,
    Snapshot,
    abc_flow,
    project_solenoidal,
    random_solenoidal,
    static_series,
    write_series,
)
from cascade_lab.mhd_dns import SolverConfig, pressure_from_fields, run

from conftest import CRITERIA

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"
sys.path.insert(0, str(SCRIPTS))

RHO = 7 / 8
L = 2 * np.pi
R0 = L / 4


def record(n, ok, detail=""):
    CRITERIA[n] = ("PASS" if ok else "FAIL", detail)


# --- 1 ----------------------------------------------------------------------


def _densities(g, k=100, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(k):
        kind = i % 4
        if kind == 0:
            u = random_solenoidal(g, seed=int(rng.integers(2**31)), k_max=8)
            f = np.sum(u * u, 0)
        elif kind == 1:
            f = rng.random(g.shape) ** 3
        elif kind == 2:
            f = np.exp(3 * rng.standard_normal(g.shape))
        else:
            f = (rng.random(g.shape) < 0.05) * rng.random(g.shape)
        out.append(f)
    return np.stack(out)


def test_criterion_1_lemma_sandwich():
    g = Grid(32, L)
    record(1, False, "did not complete")
    t0 = time.time()
    f = _densities(g)
    phi0 = integral_cutoff(g, R0, 1.0)
    worst_lo, worst_hi, cases, failures = math.inf, math.inf, 0, 0
    for frac in (1.0, 0.5, 0.25):
        for seed in range(10):
            cover = build_cover(R0, frac * R0, 8, 8, "jittered_lattice", seed=seed)
            reps = lemma_sandwich_check(f, cover, g, phi0=phi0, strict=False)
            for r in reps:
                cases += 1
                failures += not r.passed
                if r.F0 > 0:
                    worst_lo = min(worst_lo, r.mean / r.lower)
                    worst_hi = min(worst_hi, r.upper / r.mean)
    elapsed = time.time() - t0
    ok = failures == 0 and cases == 3000 and elapsed <= 120
    record(1, ok, f"{cases - failures}/{cases} cases hold; min margins mean/lower={worst_lo:.3g}, "
                  f"upper/mean={worst_hi:.3g}; {elapsed:.0f}s (limit 120s)")
    assert cases == 3000 and failures == 0
    assert elapsed <= 120


# --- 2 ----------------------------------------------------------------------


def test_criterion_2_cutoff_audit():
    record(2, False, "did not complete")
    g = Grid(32, L)
    psi0 = integral_profile(g, R0)
    cover = build_cover(R0, R0 / 2, 8, 8, "jittered_lattice", seed=0)
    failures = []
    for i, c in enumerate(cover.centers):
        cut = build_cutoff(c, cover.R, RHO, RHO, g, 1.0, R0=R0)
        chk = verify_cutoff(cut)
        if not (chk.passed and np.all(cut.full_psi() <= psi0 + 1e-15)):
            failures.append(i)
    probes = [two_grid_probe(c, R, RHO, RHO, g, 1.0, R0=R0) for c, R in (((0.1, 0.0, -0.2), R0 / 4), ((0, 0, 0), R0 / 2))]
    stable = all(p["stable"] for p in probes)
    neg = two_grid_probe((0.1, 0.0, -0.2), R0 / 4, RHO, RHO, g, 1.0, R0=R0, power=1)
    ok = not failures and stable and neg["divergent"]
    record(2, ok, f"{cover.n - len(failures)}/{cover.n} elements pass; C0 refinement ratios "
                  f"{[round(p['ratio'], 4) for p in probes]}; m=1 spatial ratio {neg['spatial_ratio']:.3g} (divergent)")
    assert ok


# --- 3 ----------------------------------------------------------------------


def _abc_pair(g):
    u = abc_flow(g, 1.0, 0.8, 0.6)
    x = g.mesh
    b = np.stack([0.7 * np.sin(x[1] + 0.3) + 0.2 * np.cos(2 * x[2]), 0.5 * np.cos(x[2]), 0.9 * np.sin(x[0])])
    return u, project_solenoidal(b, g)


def test_criterion_3_ibp_identities():
    record(3, False, "did not complete")
    g = Grid(64, L)
    u, b = _abc_pair(g)
    s = static_series(g, PhysParams(0.01, 0.02, R0, 1.0), u, b, pressure_from_fields(u, b, g), 3)
    worst, worst_v = 0.0, 0.0
    for c, R in (((0, 0, 0), R0), ((0.3, -0.2, 0.1), R0 / 2), ((1.0, 0.5, 0.2), R0 / 2), ((0.1, 0.1, 0.1), R0 / 4)):
        cut = build_cutoff(c, R, RHO, RHO, g, 1.0, R0=R0, window="none")
        worst = max(worst, max(v["rel_strict"] for v in ibp_identities(s, cut).values()))
        st = stretching_identity(s, cut)
        worst_v = max(worst_v, abs(st.residual(static=True)) / abs(st.V))
    ok = worst <= 1e-8 and worst_v <= 1e-8
    record(3, ok, f"max relative gap: flux identities {worst:.2e}, stretching identity {worst_v:.2e} (tol 1e-8)")
    assert ok


# --- 4 ----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_budget_defect_convergence():
    from ot_convergence import defects

    record(4, False, "did not complete")
    lo = defects(64, 0.1, 0.004)
    t0 = time.time()
    hi = defects(128, 0.1, 0.004)
    elapsed = time.time() - t0  # the runtime limit applies to the N=128 run
    ratio = np.array(lo["rel_defect"]) / np.array(hi["rel_defect"])
    ok = ratio.min() >= 2 and hi["max"] <= 0.01 and elapsed <= 600
    record(4, ok, f"max |F_inf|/E0: N=64 {lo['max']:.2e}, N=128 {hi['max']:.2e} (<= 1e-2); "
                  f"min per-element reduction {ratio.min():.3g} (>= 2) over {hi['n']} elements; "
                  f"N=128 run {elapsed:.0f}s (limit 600s)")
    assert ratio.min() >= 2 and hi["max"] <= 0.01
    assert elapsed <= 600


# --- 5 ----------------------------------------------------------------------


def _random_series(seed):
    rng = np.random.default_rng(seed)
    g = Grid(32, L)
    nu = float(rng.uniform(0.005, 0.05))
    T = R0**2 / nu  # the flux relation F = (nu/T^2) F* holds for T = R0^2/nu
    params = PhysParams(nu, float(rng.uniform(0.005, 0.05)), R0, T)
    snaps = []
    for t in np.linspace(0.0, T, 5):
        u = random_solenoidal(g, seed=int(rng.integers(2**31)), k_max=5, energy=float(rng.uniform(0.1, 2)))
        b = random_solenoidal(g, seed=int(rng.integers(2**31)), k_max=5, energy=float(rng.uniform(0.1, 2)))
        snaps.append(Snapshot(float(t), u, b, pressure_from_fields(u, b, g)))
    return FieldSeries(g, params, snaps)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_criterion_5_nondimensional_relations():
    record(5, False, "did not complete")
    worst = {"round_trip": 0.0, "e0": 0.0, "E0u": 0.0, "E0b": 0.0, "F": 0.0}
    for seed in range(3):
        s = _random_series(seed)
        p = s.params
        ns = nondimensionalize(s)
        back = dimensionalize(ns)
        for a, b in zip(s.snapshots, back.snapshots):
            for x, y in ((a.u, b.u), (a.b, b.b), (a.p, b.p)):
                worst["round_trip"] = max(worst["round_trip"], np.max(np.abs(x - y)) / np.max(np.abs(x)))
            worst["round_trip"] = max(worst["round_trip"], _rel(a.time, b.time) if a.time else 0.0)
        d = scale_diagnostics(s, integral_cutoff(s.grid, R0, p.T))
        dn = scale_diagnostics(ns, integral_cutoff(ns.grid, 1.0, 1.0))
        worst["e0"] = max(worst["e0"], _rel(d.e0, R0**2 / p.T**2 * dn.e0))
        worst["E0u"] = max(worst["E0u"], _rel(d.E0_u, p.nu / p.T**2 * dn.E0_u))
        worst["E0b"] = max(worst["E0b"], _rel(d.E0_b, p.eta / p.T**2 * dn.E0_b))
        for c, R in (((0.2, -0.1, 0.3), R0 / 2), ((0.0, 0.0, 0.0), R0)):
            cut = build_cutoff(c, R, RHO, RHO, s.grid, p.T, R0=R0)
            cutn = build_cutoff(np.array(c) / R0, R / R0, RHO, RHO, ns.grid, 1.0, R0=1.0)
            for kind in ("u", "b", "p", "ub"):
                F, Fs = flux_component(s, cut, kind).value, flux_component(ns, cutn, kind).value
                worst["F"] = max(worst["F"], _rel(F, p.nu / p.T**2 * Fs))
            F, Fs = flux_total_energy(s, cut).value, flux_total_energy(ns, cutn).value
            worst["F"] = max(worst["F"], _rel(F, p.nu / p.T**2 * Fs))
    ok = worst["round_trip"] <= 1e-12 and all(worst[k] <= 1e-10 for k in ("e0", "E0u", "E0b", "F"))
    record(5, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-10)")
    assert ok


# --- 6 ----------------------------------------------------------------------


def test_criterion_6_locality_implication(tmp_path):
    record(6, False, "did not complete")
    # a short forced run analysed through the CLI, every theorem
    cfg = SolverConfig.from_dict({
        "grid": {"N": 32, "L": L}, "params": {"nu": 0.02, "eta": 0.02, "R0": R0}, "dt": 0.02, "t_end": 0.4,
        "forcing": {"k_min": 1, "k_max": 2, "rate": 0.2},
        "init": {"u": {"kind": "random_solenoidal", "seed": 4, "k_max": 4, "energy": 0.5},
                 "b": {"kind": "random_solenoidal", "seed": 5, "k_max": 4, "energy": 0.3}},
    })
    write_series(tmp_path / "series", run(cfg, snapshot_stride=2))
    conf = tmp_path / "a.json"
    conf.write_text(json.dumps({
        "command": "analyze", "snapshots": str(tmp_path / "series"),
        "theorems": ["4.1", "4.2", "5.1", "6.1", "6.2", "8.1"],
        "cover": {"scales": [1.0, 0.7071067811865476, 0.5], "covers_per_scale": 2},
    }))
    assert cli_main(["analyze", "--config", str(conf), "--output", str(tmp_path / "out")]) == 0
    recs = [json.loads(x) for x in (tmp_path / "out" / "analysis.jsonl").read_text().splitlines()]
    pairs = [p for r in recs if r["record"] == "locality" for p in r.get("pairs", [])]
    in_sw = [p for p in pairs if p.get("both_in_sandwich")]
    run_ok = all(p["derived_pass"] for p in in_sw)
    # synthetic means covering the sandwich, its edges and its exterior
    rng = np.random.default_rng(6)
    n_checked = 0
    for _ in range(2000):
        K1, K2 = rng.uniform(1, 16, 2)
        E0 = float(np.exp(rng.uniform(-5, 5)))
        scales = np.sort(rng.uniform(0.05, 1.0, 4))
        lo, hi = E0 / (2 * K1), 2 * K2 * E0
        means = {}
        for R in scales:
            u = rng.random()
            means[float(R)] = lo if u < 0.1 else hi if u < 0.2 else float(rng.uniform(0.5 * lo, 1.5 * hi))
        rep = locality_report(means, K1, K2, E0_ref=E0)  # raises LocalityViolation
        for p in rep.pairs:
            if p.get("both_in_sandwich"):
                n_checked += 1
                assert p["derived_pass"]
    ok = run_ok
    record(6, ok, f"analyze run: {len(in_sw)}/{len(pairs)} pairs inside the sandwich, all satisfy the derived bound; "
                  f"synthetic: {n_checked} in-sandwich pairs, no violation")
    assert ok


# --- 7 ----------------------------------------------------------------------


def test_criterion_7_jensen():
    record(7, False, "did not complete")
    rng = np.random.default_rng(7)
    worst = -math.inf
    bad = 0
    for i in range(1000):
        n = int(rng.integers(1, 200))
        a = rng.random(n) * 10.0 ** rng.uniform(-6, 6, n)
        if i % 10 == 0:
            a[rng.random(n) < 0.5] = 0.0
        lhs, rhs = jensen_sides(a)
        gap = (lhs - rhs) / max(rhs, 1e-300)
        worst = max(worst, gap)
        bad += lhs > rhs * (1 + 4 * np.finfo(float).eps)
    record(7, bad == 0, f"1000 vectors, max (lhs - rhs)/rhs = {worst:.2e} (rounding allowance 4 ulp)")
    assert bad == 0


# --- 8 ----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_cascade_demonstration():
    from forced_cascade import demo

    record(8, False, "did not complete")
    r = demo(N=64, covers=10)
    rows = "; ".join(f"R/R0={x['R_over_R0']:.3f} <F>={x['mean']:+.3e}" for x in r["rows"])
    detail = (f"(report-level) tau/beta={r['lower']:.3g} vs R0/2={R0 / 2:.3g}, precondition "
              f"{'met' if r['precondition'] else 'not met'}; positive at all ladder scales: {r['all_positive']}; "
              f"cover spread within 4*K1*K2: {r['spread_ok']}; {rows}; {r['seconds']:.0f}s (limit 900s)")
    record(8, r["criterion"] and r["seconds"] <= 900, detail)
    if not (r["criterion"] and r["seconds"] <= 900):
        pytest.xfail("report-level criterion not met: " + detail)

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_lab.covers_cutoffs import build_cover, integral_cutoff
from cascade_lab.ensemble_analysis import (
    attach_cover_spread,
    append_jsonl,
    cascade_verdict,
    default_scales,
    ensemble_average,
    ensemble_scan,
    lemma_sandwich_check,
    locality_report,
    write_verdict_csv,
)
from cascade_lab.flux_engine import flux_component, scale_diagnostics
from cascade_lab.grid_fields import PhysParams, abc_flow, random_solenoidal, sine_shear, static_series
from cascade_lab.mhd_dns import pressure_from_fields
from cascade_lab.covers_cutoffs import build_cutoff

R0 = np.pi / 2


def _series(g, u, b, T=1.0):
    p = pressure_from_fields(u, b, g) if (u.any() or b.any()) else np.zeros(g.shape)
    return static_series(g, PhysParams(0.01, 0.01, R0, T), u, b, p, 5)


def test_zero_velocity_zero_flux(g32):
    z = np.zeros((3,) + g32.shape)
    s = _series(g32, z, abc_flow(g32))
    r = ensemble_average(s, build_cover(R0, R0 / 2, 8, 8), "u")
    assert r.mean == 0.0 and all(v.value == 0.0 for v in r.values)


def test_single_element_matches_sample(g32):
    s = _series(g32, abc_flow(g32), 0.5 * abc_flow(g32, 1, 0.3, 0.2))
    r = ensemble_average(s, build_cover(R0, R0, 1, 1), "u")
    direct = flux_component(s, build_cutoff((0, 0, 0), R0, 7 / 8, 7 / 8, g32, 1.0, R0=R0), "u").value
    assert r.mean == pytest.approx(direct, rel=1e-13)


def test_cover_spread_recomputation(g32):
    s = _series(g32, abc_flow(g32), 0.5 * abc_flow(g32, 1, 0.3, 0.2))
    covers = [build_cover(R0, R0 / 2, 8, 8, "jittered_lattice", seed=k) for k in (0, 1)]
    res = [x["E"] for x in ensemble_scan(s, covers, ("E",))]
    spread = attach_cover_spread(res)
    for cov, r in zip(covers, res):
        again = ensemble_average(s, cov, "E").mean
        assert again == r.mean
        assert spread["min"] <= again <= spread["max"]


def test_scan_deterministic(g32):
    s = _series(g32, abc_flow(g32), 0.5 * abc_flow(g32, 1, 0.3, 0.2))
    cov = build_cover(R0, R0 / 2, 8, 8, "jittered_lattice", seed=5)
    a = ensemble_scan(s, [cov], ("E", "u+p", "V"))[0]
    b = ensemble_scan(s, [cov], ("E", "u+p", "V"))[0]
    for k in ("E", "u+p", "V"):
        assert json.dumps(a[k].to_dict()) == json.dumps(b[k].to_dict())


def test_lemma_constant_density(g32):
    for R in (R0, R0 / 2):
        cov = build_cover(R0, R, 8, 8, "jittered_lattice", seed=2)
        (rep,) = lemma_sandwich_check(np.ones(g32.shape), cov, g32)
        assert rep.passed and rep.lower <= rep.mean <= rep.upper


def test_lemma_zero_density(g32):
    (rep,) = lemma_sandwich_check(np.zeros(g32.shape), build_cover(R0, R0 / 2, 8, 8), g32)
    assert rep.F0 == rep.mean == 0.0 and rep.passed


def test_lemma_rejects_negative(g32):
    f = np.ones(g32.shape)
    f[3, 3, 3] = -1e-9
    with pytest.raises(ValueError, match="non-negative"):
        lemma_sandwich_check(f, build_cover(R0, R0 / 2, 8, 8), g32)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lemma_random_energy_density(seed):
    from cascade_lab.grid_fields import Grid
    g = Grid(32, 2 * np.pi)
    u = random_solenoidal(g, seed=seed, k_max=6)
    cov = build_cover(R0, R0 / 2, 8, 8, "jittered_lattice", seed=seed % 7)
    (rep,) = lemma_sandwich_check(np.sum(u * u, 0), cov, g)
    assert rep.passed


def test_default_ladder():
    s = default_scales(1.0)
    assert len(s) == 7 and s[0] == 1.0 and s[2] == pytest.approx(0.5) and s[-1] == pytest.approx(0.125)
    assert default_scales(1.0, 0.6) == [1.0, pytest.approx(2**-0.5)]


def _laminar(g):
    u = sine_shear(g, k=1)
    return _series(g, u, 0.5 * u)


def test_laminar_range_empty(g32):
    s = _laminar(g32)
    d = scale_diagnostics(s, integral_cutoff(g32, R0, 1.0), K1=8, K2=8)
    cov = build_cover(R0, R0, 8, 8)
    res = {R0: [ensemble_scan(s, [cov], ("E",))[0]["E"]]}
    v = cascade_verdict(s, d, res, "4.1")
    assert v.status == "inertial range empty"
    assert not any(p["in_range"] for p in v.per_scale)


def test_e0u_flag_false(g32):
    u = sine_shear(g32, k=1)
    z = np.zeros_like(u)
    phi0 = integral_cutoff(g32, R0, 1.0)
    d = scale_diagnostics(_series(g32, u, z), phi0)
    # e0u* is quadratic in u: rescale so that it equals 0.5
    u = u * np.sqrt(0.5 / (d.e0_u * 1.0**2 / R0**2))
    s = _series(g32, u, z)
    d = scale_diagnostics(s, phi0, K1=8, K2=8)
    res = {R0: [ensemble_scan(s, [build_cover(R0, R0, 8, 8)], ("u",))[0]["u"]]}
    v = cascade_verdict(s, d, res, "6.1")
    assert v.flags["e0u_star"] == pytest.approx(0.5, rel=1e-12)
    assert v.flags["e0u_ge_1"] is False


def test_locality_dyadic_stated_bounds():
    K1, K2 = 2.0, 3.0
    rep = locality_report({1.0: 1.0, 2.0: 1.0}, K1, K2)
    pair = next(p for p in rep.pairs if p["r"] == 2.0 and p["R"] == 1.0)
    assert pair["stated_bound"] == (pytest.approx(8 / (4 * K1**2)), pytest.approx(4 * K2**2 * 8))


def test_locality_diagonal_is_one():
    rep = locality_report({1.0: 2.0, 0.5: 3.0}, 8, 8)
    d = [p for p in rep.pairs if p["r"] == p["R"]]
    assert len(d) == 2 and all(p["ratio"] == 1.0 and p["derived_pass"] for p in d)


@settings(max_examples=50)
@given(st.floats(1.0, 16.0), st.floats(1.0, 16.0), st.floats(1e-3, 1e3), st.floats(0.1, 0.9))
def test_locality_edges_inclusive(K1, K2, E0, q):
    r, R = q, 1.0
    means = {r: E0 / (2 * K1), R: 2 * K2 * E0}
    rep = locality_report(means, K1, K2, E0_ref=E0)
    p = next(p for p in rep.pairs if p["r"] == r and p["R"] == R)
    assert p["ratio"] == pytest.approx(r**3 / (4 * K1 * K2), rel=1e-12)
    assert p["derived_pass"] and p["both_in_sandwich"]


@settings(max_examples=50)
@given(st.floats(1.0, 16.0), st.floats(1.0, 16.0), st.floats(1e-3, 1e3), st.floats(0, 1), st.floats(0, 1))
def test_locality_implication(K1, K2, E0, a, b):
    lo, hi = E0 / (2 * K1), 2 * K2 * E0
    means = {0.3: lo + a * (hi - lo), 1.0: lo + b * (hi - lo)}
    rep = locality_report(means, K1, K2, E0_ref=E0)  # raises on violation
    assert all(p["derived_pass"] for p in rep.pairs)


def test_locality_zero_denominator_skipped():
    rep = locality_report({1.0: 0.0, 0.5: 1.0}, 8, 8)
    assert any(s["R"] == 1.0 for s in rep.skipped)


def test_outputs(tmp_path, g32):
    s = _laminar(g32)
    d = scale_diagnostics(s, integral_cutoff(g32, R0, 1.0), K1=8, K2=8)
    res = {R0: [ensemble_scan(s, [build_cover(R0, R0, 8, 8)], ("E",))[0]["E"]]}
    v = cascade_verdict(s, d, res, "4.1")
    append_jsonl(tmp_path / "a.jsonl", v.to_dict())
    rec = json.loads((tmp_path / "a.jsonl").read_text())
    assert rec["status"] == "inertial range empty"
    write_verdict_csv(tmp_path / "v.csv", [v])
    head = (tmp_path / "v.csv").read_text().splitlines()[0]
    assert head.startswith("theorem,scale,kind,mean,lower_bound,upper_bound,pass")

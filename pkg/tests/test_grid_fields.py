import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_lab.grid_fields import (
    ChecksumError,
    FieldSeries,
    Grid,
    GridError,
    PhysParams,
    SnapshotFormatError,
    Snapshot,
    abc_flow,
    gen_field,
    integrate,
    make_grid,
    project_solenoidal,
    random_solenoidal,
    read_series,
    read_snapshot,
    sine_shear,
    spectral_derivative,
    write_series,
    write_snapshot,
)


def test_grid_spacing(g32):
    assert g32.spacing == pytest.approx(2 * np.pi / 32, rel=1e-15)
    assert g32.x[0] == pytest.approx(-np.pi)


@pytest.mark.parametrize("N", [17, 8, 48])
def test_grid_rejects_bad_n(N):
    with pytest.raises(GridError):
        make_grid(N, 1.0)


def test_max_wavenumber():
    assert make_grid(64, 4 * np.pi).max_wavenumber == pytest.approx(16.0)


def test_projection_kills_gradients(g32):
    x1 = g32.mesh[0]
    f = np.stack([np.cos(x1), 0 * x1, 0 * x1])  # grad(sin x1)
    assert np.max(np.abs(project_solenoidal(f, g32))) < 1e-13


def test_projection_fixes_abc(g32):
    u = abc_flow(g32)
    assert np.max(np.abs(project_solenoidal(u, g32) - u)) <= 1e-12 * np.max(np.abs(u))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_idempotent(seed):
    g = Grid(16, 2 * np.pi)
    f = np.random.default_rng(seed).standard_normal((3,) + g.shape)
    p1 = project_solenoidal(f, g)
    p2 = project_solenoidal(p1, g)
    assert np.max(np.abs(p2 - p1)) <= 1e-14 * np.max(np.abs(p1)) * 10


def test_gradient_of_sine():
    g = Grid(32, 3.0)
    x1 = g.mesh[0]
    d = spectral_derivative(np.sin(2 * np.pi * x1 / g.L), g, "gradient")
    np.testing.assert_allclose(d[0], 2 * np.pi / g.L * np.cos(2 * np.pi * x1 / g.L), atol=1e-12)
    assert np.max(np.abs(d[1:])) < 1e-12


def test_laplacian_of_constant(g32):
    assert np.max(np.abs(spectral_derivative(np.full(g32.shape, 3.0), g32, "laplacian"))) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_div_curl_vanishes(seed):
    g = Grid(16, 2 * np.pi)
    f = np.random.default_rng(seed).standard_normal((3,) + g.shape)
    d = spectral_derivative(spectral_derivative(f, g, "curl"), g, "divergence")
    assert np.max(np.abs(d)) <= 1e-12 * np.max(np.abs(f)) * g.N


def test_abc_components(g32):
    u = abc_flow(g32, 1, 1, 1)
    x1, x2, x3 = g32.mesh
    np.testing.assert_allclose(u[0], np.sin(x3) + np.cos(x2), atol=1e-15)
    np.testing.assert_allclose(u[1], np.sin(x1) + np.cos(x3), atol=1e-15)
    np.testing.assert_allclose(u[2], np.sin(x2) + np.cos(x1), atol=1e-15)


def test_random_field_deterministic(g32):
    a = random_solenoidal(g32, 5 / 3, 2, 8, seed=7)
    b = random_solenoidal(g32, 5 / 3, 2, 8, seed=7)
    assert np.array_equal(a, b)
    assert np.max(np.abs(spectral_derivative(a, g32, "divergence"))) < 1e-12


def test_random_field_energy(g32):
    a = random_solenoidal(g32, energy=0.3, seed=1)
    assert 0.5 * np.mean(np.sum(a * a, 0)) == pytest.approx(0.3, rel=1e-12)


def test_sine_shear_divergence_free(g32):
    u = sine_shear(g32, k=2)
    assert np.max(np.abs(spectral_derivative(u, g32, "divergence"))) == 0.0
    np.testing.assert_allclose(u[0], np.sin(2 * 2 * np.pi * g32.mesh[1] / g32.L), atol=1e-15)


def test_gen_field_unknown(g32):
    with pytest.raises(ValueError):
        gen_field(g32, {"kind": "nope"})


def test_integrate_constant(g32):
    assert integrate(np.ones(g32.shape), g32) == pytest.approx((2 * np.pi) ** 3, rel=1e-14)


def test_integrate_sine_squared():
    g = Grid(32, 5.0)
    f = np.sin(2 * np.pi * g.mesh[0] / g.L) ** 2
    assert integrate(f, g) == pytest.approx(g.L**3 / 2, rel=1e-12)


def test_integrate_refinement_oracle():
    vals = []
    for N in (32, 64):
        g = Grid(N, 2 * np.pi)
        u = abc_flow(g)
        vals.append(integrate((u[0] * u[1] * u[2]) ** 2, g))
    assert vals[0] == pytest.approx(vals[1], rel=1e-10)


def test_integrate_rejects_nan(g32):
    f = np.ones(g32.shape)
    f[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        integrate(f, g32)


def _random_series(g, n=3, seed=0):
    rng = np.random.default_rng(seed)
    params = PhysParams(0.01, 0.01, 1.0, 1.0)
    snaps = []
    for t in np.linspace(0, 1, n):
        p = rng.standard_normal(g.shape)
        snaps.append(Snapshot(float(t), rng.standard_normal((3,) + g.shape), rng.standard_normal((3,) + g.shape), p - p.mean()))
    return FieldSeries(g, params, snaps, {"k_min": 1, "k_max": 2, "rate": 0.1})


def test_series_round_trip(tmp_path):
    g = Grid(16, 2.0)
    s = _random_series(g)
    write_series(tmp_path / "s", s)
    r = read_series(tmp_path / "s")
    assert r.grid == g and r.params == s.params and r.forcing == s.forcing
    for a, b in zip(s.snapshots, r.snapshots):
        assert a.time == b.time
        assert np.array_equal(a.u, b.u) and np.array_equal(a.b, b.b) and np.array_equal(a.p, b.p)


def test_dimensionless_form_survives(tmp_path):
    g = Grid(16, 2.0)
    params = PhysParams(0.01, 0.01, 1.0, 1.0, Re=10.0, Rm=20.0, M=5.0, form="dimensionless")
    z = np.zeros((3,) + g.shape)
    write_snapshot(tmp_path / "a.mhdc", Snapshot(0.0, z, z, z[0]), g, params)
    _, _, p = read_snapshot(tmp_path / "a.mhdc")
    assert p == params


def test_bad_magic(tmp_path):
    g = Grid(16, 2.0)
    s = _random_series(g, 1)
    path = tmp_path / "a.mhdc"
    write_snapshot(path, s.snapshots[0], g, s.params)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(SnapshotFormatError):
        read_snapshot(path)


def test_payload_corruption(tmp_path):
    g = Grid(16, 2.0)
    s = _random_series(g, 1)
    path = tmp_path / "a.mhdc"
    write_snapshot(path, s.snapshots[0], g, s.params)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_snapshot(path)


def test_truncated(tmp_path):
    g = Grid(16, 2.0)
    s = _random_series(g, 1)
    path = tmp_path / "a.mhdc"
    write_snapshot(path, s.snapshots[0], g, s.params)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(SnapshotFormatError):
        read_snapshot(path)


def test_validate_catches_bad_times(g32):
    s = _random_series(Grid(16, 2.0))
    s.snapshots[1].time = 0.0
    with pytest.raises(ValueError):
        s.validate()


def test_params_units():
    p = PhysParams(0.01, 0.02, 2.0, 3.0)
    assert p.length_unit == 2.0 and p.time_unit == 3.0 and p.Pr == pytest.approx(0.5)
    q = PhysParams(0.01, 0.02, 2.0, 3.0, Re=4.0, Rm=9.0, M=6.0, form="dimensionless")
    assert q.length_unit == 1.0 and q.time_unit == 1.0 and q.S == pytest.approx(1.0)
    assert not p.time_scale_ok and PhysParams(1.0, 1.0, 1.0, 1.0).time_scale_ok
    assert math.isclose(q.visc, 0.25) and math.isclose(q.resist, 1 / 9)

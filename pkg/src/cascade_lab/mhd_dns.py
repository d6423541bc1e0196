"""Pseudo-spectral integrator for incompressible 3D MHD on the periodic box.

RK4 with an integrating factor for the diffusive terms and 2/3-rule
dealiasing.  The dimensional system is

    u_t - nu Lap u + (u.grad)u - (b.grad)b + grad(p + |b|^2/2) = 0
    b_t - eta Lap b + (u.grad)b - (b.grad)u = 0

and the dimensionless one replaces nu, eta by 1/Re, 1/Rm and weights the
Lorentz force by S.  Nonlinear terms are evaluated in divergence form,
``d_j(u_i u_j - S b_i b_j)`` and ``d_j(u_i b_j - u_j b_i)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .grid_fields import (
    FieldSeries,
    Grid,
    PhysParams,
    Snapshot,
    fft,
    gen_field,
    ifft,
    make_grid,
    project_hat,
)

log = logging.getLogger(__name__)

CFL_LIMIT = 0.5
ENERGY_SLACK = 1e-8

_PAIRS = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


class CFLError(RuntimeError):
    pass


class InstabilityError(RuntimeError):
    pass


class DivergenceError(ValueError):
    pass


@dataclass
class SolverConfig:
    grid: Grid
    params: PhysParams
    dt: float
    t_end: float
    init: dict = field(default_factory=lambda: {"u": {"kind": "zero"}, "b": {"kind": "zero"}})
    forcing: dict | None = None
    dealias: bool = True
    nonlinear: bool = True
    adaptive: bool = False

    @property
    def form(self) -> str:
        return self.params.form

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        g = d["grid"]
        params = dict(d["params"])
        params.setdefault("T", d["t_end"])
        return cls(
            grid=make_grid(g["N"], g["L"]),
            params=PhysParams.from_dict(params),
            dt=float(d["dt"]),
            t_end=float(d["t_end"]),
            init=d.get("init", {"u": {"kind": "zero"}, "b": {"kind": "zero"}}),
            forcing=d.get("forcing"),
            dealias=bool(d.get("dealias", True)),
            nonlinear=bool(d.get("nonlinear", True)),
            adaptive=bool(d.get("adaptive", False)),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "SolverConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class State:
    t: float
    uh: np.ndarray
    bh: np.ndarray


@dataclass
class RunLog:
    steps: int = 0
    dt_reductions: list[tuple[float, float]] = field(default_factory=list)
    energies: list[tuple[float, float]] = field(default_factory=list)


def max_divergence(f: np.ndarray, grid: Grid) -> float:
    kx, ky, kz = grid.k
    fh = fft(f)
    return float(np.max(np.abs(ifft(1j * (kx * fh[0] + ky * fh[1] + kz * fh[2]), grid))))


def _div_threshold(f: np.ndarray, grid: Grid, factor: float) -> float:
    scale = float(np.max(np.abs(f))) if f.size else 0.0
    return factor * (2 * math.pi * grid.N / grid.L) * max(scale, 1e-300)


def _products_hat(u: np.ndarray, b: np.ndarray, coupling: float, induction: bool = True):
    """FFTs of the symmetric momentum flux and the antisymmetric induction flux."""
    M = {}
    for i, j in _PAIRS:
        M[i, j] = fft(u[i] * u[j] - coupling * b[i] * b[j])
        M[j, i] = M[i, j]
    W = {}
    for i, j in ((0, 1), (0, 2), (1, 2)) if induction else ():
        W[i, j] = fft(u[i] * b[j] - u[j] * b[i])
        W[j, i] = -W[i, j]
    return M, W


def _total_pressure_hat(M: dict, grid: Grid) -> np.ndarray:
    k = grid.k
    s = sum(k[i] * k[j] * M[i, j] for i in range(3) for j in range(3))
    ph = -s / grid.k2_safe
    ph[0, 0, 0] = 0.0
    return ph


def pressure_from_fields(
    u: np.ndarray, b: np.ndarray, grid: Grid, form: str = "dimensional", coupling: float = 1.0,
    dealias: bool = False, check: bool = True,
) -> np.ndarray:
    """Zero-mean fluid pressure p.

    The Poisson problem is solved for the total pressure
    ``P = p + S|b|^2/2`` with ``Lap P = -div[(u.grad)u - S(b.grad)b]``; the
    magnetic part is then removed so the returned array is the fluid pressure.
    ``coupling`` is S and is ignored for the dimensional form.
    """
    grid.check(u, 3)
    grid.check(b, 3)
    S = 1.0 if form == "dimensional" else coupling
    if check:
        for name, f in (("u", u), ("b", b)):
            if f.any() and max_divergence(f, grid) > _div_threshold(f, grid, 1e-8):
                raise DivergenceError(f"{name} is not solenoidal")
    M, _ = _products_hat(u, b, S, induction=False)
    if dealias:
        M = {key: v * grid.dealias_mask for key, v in M.items()}
    P = ifft(_total_pressure_hat(M, grid), grid)
    p = P - 0.5 * S * np.sum(b * b, axis=0)
    return p - p.mean()


def _band(grid: Grid, k_min: float, k_max: float) -> np.ndarray:
    return (grid.n_abs >= k_min) & (grid.n_abs <= k_max)


def _forcing_hat(uh: np.ndarray, band: np.ndarray, rate: float, grid: Grid) -> np.ndarray:
    ub = uh * band
    e_band = 0.5 * float(np.sum(grid.rfft_weight * np.abs(ub) ** 2)) / grid.N**6
    return ub * (rate / (2 * e_band)) if e_band > 0 else np.zeros_like(uh)


def forcing_field(u: np.ndarray, grid: Grid, forcing: dict | None, dealias: bool = True) -> np.ndarray:
    """Band forcing f = rate * u_band / (2 E_band) evaluated from a velocity snapshot."""
    if not forcing:
        return np.zeros_like(u)
    band = _band(grid, forcing.get("k_min", 1), forcing.get("k_max", 2))
    if dealias:
        band = band & grid.dealias_mask
    return ifft(_forcing_hat(fft(u), band, float(forcing.get("rate", 0.1)), grid), grid)


class Integrator:
    """Holds the per-grid operators for one configuration."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        g = cfg.grid
        p = cfg.params
        self.grid = g
        self.visc = p.visc
        self.resist = p.resist
        self.S = p.coupling
        self.mask = g.dealias_mask if cfg.dealias else np.ones(g.k2.shape, dtype=bool)
        f = cfg.forcing
        self.band = _band(g, f.get("k_min", 1), f.get("k_max", 2)) & self.mask if f else None
        self.rate = float(f.get("rate", 0.1)) if f else 0.0
        self._exp: dict = {}

    def initial_state(self) -> State:
        g = self.grid
        u0 = gen_field(g, self.cfg.init.get("u", {"kind": "zero"}))
        b0 = gen_field(g, self.cfg.init.get("b", {"kind": "zero"}))
        return self.state_from_fields(0.0, u0, b0)

    def state_from_fields(self, t: float, u: np.ndarray, b: np.ndarray) -> State:
        return State(t, project_hat(fft(u), self.grid) * self.mask, project_hat(fft(b), self.grid) * self.mask)

    def fields(self, s: State) -> tuple[np.ndarray, np.ndarray]:
        return ifft(s.uh, self.grid), ifft(s.bh, self.grid)

    def rhs(self, uh: np.ndarray, bh: np.ndarray, fields: tuple | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Spectral tendencies; ``fields`` optionally supplies the physical u, b of (uh, bh)."""
        g = self.grid
        du = np.zeros_like(uh)
        db = np.zeros_like(bh)
        if self.cfg.nonlinear:
            u, b = fields if fields is not None else (ifft(uh, g), ifft(bh, g))
            M, W = _products_hat(u, b, self.S)
            k = g.k
            for i in range(3):
                du[i] = -sum(1j * k[j] * M[i, j] for j in range(3))
                db[i] = sum(1j * k[j] * W[i, j] for j in range(3) if j != i)
            du = project_hat(du, g) * self.mask
            db = db * self.mask
        if self.band is not None:
            du = du + _forcing_hat(uh, self.band, self.rate, g)
        return du, db

    def _factors(self, dt: float):
        if dt not in self._exp:
            k2 = self.grid.k2
            self._exp = {dt: (
                np.exp(-self.visc * k2 * dt), np.exp(-self.resist * k2 * dt),
                np.exp(-self.visc * k2 * dt / 2), np.exp(-self.resist * k2 * dt / 2),
            )}
        return self._exp[dt]

    def step(self, s: State, dt: float, fields: tuple | None = None) -> State:
        Eu, Eb, Euh, Ebh = self._factors(dt)
        au, ab = self.rhs(s.uh, s.bh, fields)
        u1, b1 = Euh * (s.uh + dt / 2 * au), Ebh * (s.bh + dt / 2 * ab)
        bu, bb = self.rhs(u1, b1)
        u2, b2 = Euh * s.uh + dt / 2 * bu, Ebh * s.bh + dt / 2 * bb
        cu, cb = self.rhs(u2, b2)
        u3, b3 = Eu * s.uh + dt * Euh * cu, Eb * s.bh + dt * Ebh * cb
        du, db = self.rhs(u3, b3)
        uh = Eu * s.uh + dt / 6 * (Eu * au + 2 * Euh * (bu + cu) + du)
        bh = Eb * s.bh + dt / 6 * (Eb * ab + 2 * Ebh * (bb + cb) + db)
        if not (np.all(np.isfinite(uh)) and np.all(np.isfinite(bh))):
            raise FloatingPointError(f"non-finite field after step at t={s.t:.6g}, dt={dt:.3g}")
        return State(s.t + dt, uh, bh)

    def energy(self, s: State) -> float:
        """Total energy integral of (|u|^2 + S|b|^2)/2 over the box."""
        g = self.grid
        w = g.rfft_weight
        e = np.sum(w * np.abs(s.uh) ** 2) + self.S * np.sum(w * np.abs(s.bh) ** 2)
        return 0.5 * float(e) * g.L**3 / g.N**6

    def max_speed(self, s: State, fields: tuple | None = None) -> float:
        u, b = fields if fields is not None else self.fields(s)
        return float(max(np.sqrt(np.sum(u * u, 0)).max(), np.sqrt(np.sum(b * b, 0)).max()))

    def pressure(self, s: State) -> np.ndarray:
        return self._pressure(*self.fields(s))

    def _pressure(self, u: np.ndarray, b: np.ndarray) -> np.ndarray:
        M, _ = _products_hat(u, b, self.S, induction=False)
        M = {key: v * self.mask for key, v in M.items()}
        P = ifft(_total_pressure_hat(M, self.grid), self.grid)
        p = P - 0.5 * self.S * np.sum(b * b, axis=0)
        return p - p.mean()

    def snapshot(self, s: State, fields: tuple | None = None) -> Snapshot:
        u, b = fields if fields is not None else self.fields(s)
        return Snapshot(s.t, u, b, self._pressure(u, b))


def step(state: State, cfg: SolverConfig) -> State:
    """One RK4 step of size ``cfg.dt``; raises CFLError when the step violates the CFL limit."""
    it = Integrator(cfg)
    vmax = it.max_speed(state)
    if vmax > 0 and cfg.dt > CFL_LIMIT * cfg.grid.spacing / vmax:
        raise CFLError(f"dt={cfg.dt:.3g} exceeds CFL limit {CFL_LIMIT * cfg.grid.spacing / vmax:.3g}")
    return it.step(state, cfg.dt)


def run(
    cfg: SolverConfig,
    snapshot_stride: int = 1,
    callback: Callable[[Snapshot], None] | None = None,
    keep: bool = True,
    run_log: RunLog | None = None,
    initial: Snapshot | None = None,
) -> FieldSeries:
    """Integrate to ``cfg.t_end``; snapshots at step 0, every ``snapshot_stride`` steps and at t_end.

    ``callback`` receives every snapshot; with ``keep=False`` nothing is
    stored in the returned series, which keeps long high-resolution runs in
    bounded memory.  ``initial`` restarts from a stored snapshot (for example
    the end of a spin-up run) with the clock reset to zero.
    """
    it = Integrator(cfg)
    g = cfg.grid
    params = replace(cfg.params, T=cfg.t_end)
    series = FieldSeries(g, params, [], cfg.forcing)
    run_log = run_log if run_log is not None else RunLog()
    s = it.initial_state() if initial is None else it.state_from_fields(0.0, initial.u, initial.b)
    n_steps = max(1, math.ceil(cfg.t_end / cfg.dt - 1e-9))
    dt = cfg.t_end / n_steps
    check_energy = cfg.forcing is None

    def emit(st: State, fields: tuple) -> None:
        snap = it.snapshot(st, fields)
        if keep:
            series.snapshots.append(snap)
        if callback is not None:
            callback(snap)

    fields = it.fields(s)
    emit(s, fields)
    e_prev = it.energy(s)
    run_log.energies.append((s.t, e_prev))
    k = 0
    while s.t < cfg.t_end - 1e-12 * max(1.0, cfg.t_end):
        vmax = it.max_speed(s, fields)
        limit = CFL_LIMIT * g.spacing / vmax if vmax > 0 else math.inf
        if dt > limit * (1 + 1e-12):
            if not cfg.adaptive:
                raise CFLError(f"step {k}: dt={dt:.4g} exceeds CFL limit {limit:.4g} (max|u,b|={vmax:.4g})")
            while dt > limit:
                dt /= 2
            run_log.dt_reductions.append((s.t, dt))
            log.info("CFL: dt reduced to %.4g at t=%.4g", dt, s.t)
        h = min(dt, cfg.t_end - s.t)
        s = it.step(s, h, fields)
        fields = it.fields(s)
        k += 1
        if cfg.t_end - s.t < 1e-9 * max(1.0, cfg.t_end):
            s.t = cfg.t_end
        e = it.energy(s)
        run_log.energies.append((s.t, e))
        if check_energy and e > e_prev * (1 + ENERGY_SLACK) + 1e-300:
            raise InstabilityError(f"energy grew from {e_prev:.12g} to {e:.12g} at t={s.t:.6g}")
        e_prev = e
        if k % snapshot_stride == 0 or s.t >= cfg.t_end:
            emit(s, fields)
    run_log.steps = k
    return series


def energy_history(series: FieldSeries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Times, total energy and cumulative dissipation (trapezoid in time) of a series."""
    from .grid_fields import gradient_tensor, integrate

    g = series.grid
    p = series.params
    t, E, D = [], [], []
    for s in series:
        t.append(s.time)
        E.append(0.5 * integrate(np.sum(s.u**2, 0) + p.coupling * np.sum(s.b**2, 0), g))
        gu = gradient_tensor(s.u, g)
        gb = gradient_tensor(s.b, g)
        D.append(integrate(p.visc * np.sum(gu**2, (0, 1)) + p.coupling * p.resist * np.sum(gb**2, (0, 1)), g))
    t = np.array(t)
    D = np.array(D)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (D[1:] + D[:-1]) * np.diff(t))])
    return t, np.array(E), cum

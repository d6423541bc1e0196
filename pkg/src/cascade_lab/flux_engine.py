"""Localized space-time flux densities, energy budgets and integral-scale diagnostics.

All space-time integrals are evaluated in one streaming pass over the
snapshots: derived fields (gradients, pressure, nonlinear densities) are
computed once per snapshot on the full grid and then reduced against every
cutoff on its support box.  Time integrals use the trapezoid rule over the
snapshot times.

Per-element values are reported per unit mass, i.e. divided by ``T R^3``
where T and R are measured in the series' own units (``1`` and ``R/R0`` for
a dimensionless series).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .covers_cutoffs import RefinedCutoff
from .grid_fields import FieldSeries, Grid, PhysParams, Snapshot, fft, ifft
from .mhd_dns import forcing_field

KINDS = ("E", "E_inf", "u", "b", "p", "ub", "V")
GROUPS = ("budget", "components", "stretching")


class FluxError(ValueError):
    pass


class DegenerateFieldError(ValueError):
    pass


# --- result types ---------------------------------------------------------


@dataclass
class LocalBudget:
    """Terms of the localized energy equality, each divided by ``normalization``.

    ``dissipation + endpoint_term = time_term + laplace_term
    + pressure_velocity_flux + cross_term + forcing_work - defect``.
    ``endpoint_term`` is ``[1/2 int (|u|^2 + S|b|^2) phi dx]`` evaluated between
    the first and last snapshot; it vanishes for windows with eta = 0 at both ends.
    """

    dissipation: float
    time_term: float
    laplace_term: float
    pressure_velocity_flux: float
    cross_term: float
    defect: float
    endpoint_term: float = 0.0
    forcing_work: float = 0.0
    normalization: float = 1.0

    @property
    def flux(self) -> float:
        return self.pressure_velocity_flux + self.cross_term

    def residual(self) -> float:
        rhs = self.time_term + self.laplace_term + self.flux + self.forcing_work - self.defect
        return self.dissipation + self.endpoint_term - rhs


@dataclass
class FluxSample:
    element: int
    R: float
    kind: str
    value: float
    normalization: float
    forms: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)


@dataclass
class ScaleDiagnostics:
    e0_u: float
    e0_b: float
    E0_u: float
    E0_b: float
    tau: float
    tau4: float
    tau_b: float
    Pr: float
    Re: float
    Rm: float
    M: float
    S: float
    sup_u: float
    sup_b: float
    sup_u_local: float
    pressure_integral: float
    C: float
    C_thm6: float
    K1: float
    K2: float
    delta: float
    rho: float
    beta_total: float
    beta_u: float
    beta_b: float
    beta_V: float
    C_u: float
    C_b: float
    C_p: float
    C_V: float
    R0: float
    form: str
    time_scale_ok: bool
    n_snapshots: int

    @property
    def e0(self) -> float:
        return self.e0_u + self.e0_b

    @property
    def E0(self) -> float:
        return self.E0_u + self.E0_b

    def e0_star(self, part: str) -> float:
        """Dimensionless integral-scale energy ratio e0/E0 of one field (u or b)."""
        e, E = (self.e0_u, self.E0_u) if part == "u" else (self.e0_b, self.E0_b)
        return _ratio(e, E)

    def reference(self, theorem: str) -> float:
        """Integral-scale quantity that brackets the theorem's ensemble flux."""
        t = _theorem(theorem)
        if t in ("4.1", "4.2"):
            return self.E0
        if t == "8.1":
            return self.E0_b
        if self.form == "dimensional":
            return self.E0
        return self.E0_u / self.Re + self.S * self.E0_b / self.Rm

    def lower_scale(self, theorem: str) -> float:
        """Lower end of the theorem's inertial range, in the series' length unit."""
        t = _theorem(theorem)
        if t in ("4.1", "4.2"):
            return self.tau / self.beta_total
        if t == "8.1":
            return self.R0 * self.tau_b / self.beta_V
        return self.R0 * self.tau4 / min(self.beta_u, self.beta_b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["e0"] = self.e0
        d["E0"] = self.E0
        return d


def _theorem(t: str) -> str:
    t = str(t).strip()
    if t not in ("4.1", "4.2", "5.1", "6.1", "6.2", "8.1"):
        raise FluxError(f"unknown theorem id {t!r}")
    return t


def _ratio(a: float, b: float) -> float:
    if b == 0:
        if a == 0:
            return 0.0
        raise DegenerateFieldError("integral-scale enstrophy vanishes while the energy does not")
    return a / b


# --- pure helpers -----------------------------------------------------------


def beta_total(C: float, K1: float, K2: float, Pr: float) -> float:
    return math.sqrt(1.0 / (2.0 * C * K1 * K2 * (1.0 + 1.0 / Pr)))


def beta_quartic(C_x: float, K1: float, K2: float) -> float:
    return (1.0 / (2.0 * K1 * K2 * C_x)) ** 0.25


def jensen_sides(a: Sequence[float], power: float = 1.0 / 9.0) -> tuple[float, float]:
    """``(mean(a_i^power), mean(a_i)^power)`` for non-negative a_i (the first never exceeds the second)."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError("values must be finite and non-negative")
    if not 0 < power <= 1:
        raise ValueError("power must lie in (0, 1]")
    return float(math.fsum(a**power) / a.size), float((math.fsum(a) / a.size) ** power)


def jensen_holds(a: Sequence[float], power: float = 1.0 / 9.0, rtol: float = 1e-14) -> bool:
    lhs, rhs = jensen_sides(a, power)
    return lhs <= rhs * (1 + rtol) + 1e-300


# --- per-snapshot derived fields ------------------------------------------


def _grad(fh: np.ndarray, grid: Grid) -> np.ndarray:
    """Spectral gradient of a transformed field; vector input gives out[i, j] = d_i f_j."""
    return ifft(np.stack([1j * k * fh * grid.nyquist_mask for k in grid.k]), grid)


def _div(q: np.ndarray, grid: Grid) -> np.ndarray:
    qh = fft(q)
    return ifft(sum(1j * grid.k[j] * grid.nyquist_mask * qh[j] for j in range(3)), grid)


def _lap(f: np.ndarray, grid: Grid) -> np.ndarray:
    return ifft(-grid.k2 * fft(f), grid)


# Boundary terms int Q.grad(psi) and int B Lap(psi) are evaluated as
# -int div(Q) psi and int Lap(B) psi: the masked spectral derivative is
# skew-adjoint on the grid, so both forms agree to rounding and each cutoff
# only needs psi on its support.
_DENSITIES = {
    "budget": ("diss", "en", "lap", "u_bdry", "b_bdry", "p_bdry", "ub_bdry", "force"),
    "components": ("u_adv", "b_adv", "p_adv", "ub_adv", "V", "pv_total"),
    "stretching": ("gb2", "eb_en", "eb_lap", "tend"),
}


def _density_names(groups: set) -> list[str]:
    names = []
    for gname in GROUPS:
        if gname in groups or (gname == "components" and "stretching" in groups):
            names.extend(_DENSITIES[gname])
    return names


def _densities(snap: Snapshot, grid: Grid, params: PhysParams, forcing, names: list[str]) -> np.ndarray:
    """Stack of the requested scalar densities of one snapshot, each to be integrated against psi."""
    u, b, p = snap.u, snap.b, snap.p
    S, nu, eta = params.coupling, params.visc, params.resist
    eu = np.sum(u * u, 0)
    eb = np.sum(b * b, 0)
    ub = np.sum(u * b, 0)
    bh = fft(b)
    gu = _grad(fft(u), grid)
    gb = _grad(bh, grid)
    out = np.empty((len(names),) + grid.shape)
    adv = {}
    if any(n in names for n in _DENSITIES["components"] + ("tend",)):
        ugu = np.einsum("j...,ji...->i...", u, gu)
        ugb = np.einsum("j...,ji...->i...", u, gb)
        bgu = np.einsum("j...,ji...->i...", b, gu)
        bgb = np.einsum("j...,ji...->i...", b, gb)
        adv["V"] = np.sum(bgu * b, 0)
        adv["u_adv"] = -np.sum(ugu * u, 0)
        adv["b_adv"] = -np.sum(ugb * b, 0)
        adv["p_adv"] = -np.sum(_grad(fft(p), grid) * u, 0)
        adv["ub_adv"] = np.sum(bgb * u, 0) + adv["V"]
        if "tend" in names:
            adv["tend"] = np.sum((eta * ifft(-grid.k2 * bh, grid) - ugb + bgu) * b, 0)
    for i, n in enumerate(names):
        if n == "diss":
            out[i] = nu * np.sum(gu * gu, (0, 1)) + S * eta * np.sum(gb * gb, (0, 1))
        elif n == "en":
            out[i] = 0.5 * (eu + S * eb)
        elif n == "lap":
            out[i] = _lap(0.5 * (nu * eu + S * eta * eb), grid)
        elif n == "u_bdry":
            out[i] = -_div(0.5 * eu * u, grid)
        elif n == "b_bdry":
            out[i] = -_div(0.5 * eb * u, grid)
        elif n == "p_bdry":
            out[i] = -_div(p * u, grid)
        elif n == "ub_bdry":
            out[i] = _div(ub * b, grid)
        elif n == "pv_total":
            out[i] = -_div(0.5 * (eu + S * eb + 2 * (p + 0.5 * S * eb)) * u, grid)
        elif n == "force":
            out[i] = np.sum(forcing_field(u, grid, forcing) * u, 0) if forcing else 0.0
        elif n == "gb2":
            out[i] = np.sum(gb * gb, (0, 1))
        elif n == "eb_en":
            out[i] = 0.5 * eb
        elif n == "eb_lap":
            out[i] = _lap(0.5 * eb, grid)
        else:
            out[i] = adv[n]
    return out


def _support_matrix(cutoffs: Sequence[RefinedCutoff], grid: Grid) -> sparse.csr_matrix:
    """Row i holds psi_i h^3 on its support box, indexed by flattened full-grid position."""
    data, cols, ptr = [], [], [0]
    for c in cutoffs:
        ix = np.ix_(*(np.arange(sl.start, sl.stop) for sl in c.box))
        flat = np.ravel_multi_index(np.broadcast_arrays(*ix), grid.shape).ravel()
        psi = c.psi.ravel()
        keep = psi != 0
        data.append(psi[keep] * grid.spacing**3)
        cols.append(flat[keep])
        ptr.append(ptr[-1] + int(keep.sum()))
    size = grid.N**3
    if not cutoffs:
        return sparse.csr_matrix((0, size))
    return sparse.csr_matrix((np.concatenate(data), np.concatenate(cols), np.array(ptr)), shape=(len(cutoffs), size))


def _local_integrals(vals: np.ndarray, names: list[str], params: PhysParams) -> dict:
    out = dict(zip(names, (float(v) for v in vals)))
    S = params.coupling
    out["pv"] = out["u_bdry"] + 2 * S * out["b_bdry"] + out["p_bdry"]
    out["pv_misread"] = out["u_bdry"] + S * out["b_bdry"] + out["p_bdry"]
    out["cross"] = S * out["ub_bdry"]
    return out


class SpaceTimeAccumulator:
    """Streams snapshots and accumulates trapezoid time integrals for many cutoffs.

    For each cutoff and each spatial integral ``A(t)`` it keeps
    ``int eta A dt`` and, for the energy densities, ``int eta' A dt`` and the
    endpoint values ``eta A``.  Snapshots must arrive in increasing time.
    """

    def __init__(
        self,
        grid: Grid,
        params: PhysParams,
        cutoffs: Sequence[RefinedCutoff],
        groups: Iterable[str] = ("budget",),
        forcing: dict | None = None,
    ):
        self.grid, self.params, self.cutoffs = grid, params, list(cutoffs)
        self.groups = set(groups)
        unknown = self.groups - set(GROUPS)
        if unknown:
            raise FluxError(f"unknown groups {sorted(unknown)}")
        for c in self.cutoffs:
            if c.grid != grid:
                raise FluxError("cutoff grid does not match the series grid")
            if abs(c.T - params.time_unit) > 1e-12 * max(1.0, c.T):
                raise FluxError(f"cutoff time window T={c.T} does not match the series T={params.time_unit}")
        self.forcing = forcing
        self.names = _density_names(self.groups | {"budget"})
        self._support = _support_matrix(self.cutoffs, grid)
        self._prev: tuple | None = None
        self._first: list | None = None
        self._acc = [dict() for _ in self.cutoffs]
        self.n = 0
        self.t0 = self.t1 = None

    def add(self, snap: Snapshot) -> None:
        if self._prev is not None and snap.time <= self._prev[0]:
            raise FluxError("snapshot times must increase")
        D = _densities(snap, self.grid, self.params, self.forcing, self.names)
        local = self._support @ D.reshape(len(self.names), -1).T
        vals = []
        for c, row in zip(self.cutoffs, local):
            e, de = (float(v) for v in c.eta(snap.time))
            A = _local_integrals(row, self.names, self.params)
            w = {k: e * v for k, v in A.items()}
            w["en_t"] = de * A["en"]
            w["en_end"] = e * A["en"]
            if "eb_en" in A:
                w["eb_t"] = de * A["eb_en"]
                w["eb_end"] = e * A["eb_en"]
            vals.append(w)
        if self._prev is None:
            self._first = vals
            self.t0 = snap.time
        else:
            dt = snap.time - self._prev[0]
            for acc, a, bv in zip(self._acc, self._prev[1], vals):
                for k in bv:
                    acc[k] = acc.get(k, 0.0) + 0.5 * dt * (a[k] + bv[k])
        self._prev = (snap.time, vals)
        self.t1 = snap.time
        self.n += 1

    def integrals(self) -> list[dict]:
        """Space-time integrals per cutoff (unnormalized)."""
        if self.n < 2:
            raise FluxError("at least two snapshots are needed for time integration")
        T = self.params.time_unit
        if abs(self.t0) > 1e-12 * max(1.0, T) or abs(self.t1 - T) > 1e-9 * max(1.0, T):
            raise FluxError(f"snapshots span [{self.t0}, {self.t1}], expected [0, {T}]")
        out = []
        for acc, first, last in zip(self._acc, self._first, self._prev[1]):
            r = {k: v for k, v in acc.items() if not k.endswith("_end")}
            r["endpoint"] = last["en_end"] - first["en_end"]
            if "eb_end" in last:
                r["eb_endpoint"] = last["eb_end"] - first["eb_end"]
            out.append(r)
        return out


def _series_iter(series: FieldSeries | Iterable[Snapshot]):
    return series.snapshots if isinstance(series, FieldSeries) else series


def accumulate(
    series: FieldSeries, cutoffs: Sequence[RefinedCutoff], groups: Iterable[str] = ("budget",)
) -> list[dict]:
    acc = SpaceTimeAccumulator(series.grid, series.params, cutoffs, groups, series.forcing)
    for s in series.snapshots:
        acc.add(s)
    return acc.integrals()


def normalization(params: PhysParams, cutoff: RefinedCutoff) -> float:
    """T R^3 in the series' own units."""
    return params.time_unit * cutoff.R**3


# --- budgets and fluxes ---------------------------------------------------


def budget_from_integrals(I: dict, norm: float) -> LocalBudget:
    diss, endp = I["diss"], I["endpoint"]
    time_term = I["en_t"]
    rhs = time_term + I["lap"] + I["pv"] + I["cross"] + I["force"]
    defect = rhs - diss - endp
    return LocalBudget(
        dissipation=diss / norm, time_term=time_term / norm, laplace_term=I["lap"] / norm,
        pressure_velocity_flux=I["pv"] / norm, cross_term=I["cross"] / norm, defect=defect / norm,
        endpoint_term=endp / norm, forcing_work=I["force"] / norm, normalization=norm,
    )


def local_energy_budget(series: FieldSeries, cutoff: RefinedCutoff) -> LocalBudget:
    I = accumulate(series, [cutoff])[0]
    return budget_from_integrals(I, normalization(series.params, cutoff))


def sample_from_integrals(
    I: dict, kind: str, norm: float, R: float, element: int = 0, pressure_convention: str = "fluid"
) -> FluxSample:
    if kind not in KINDS:
        raise FluxError(f"unknown flux kind {kind!r}; expected one of {KINDS}")
    if pressure_convention not in ("fluid", "total"):
        raise FluxError(f"unknown pressure convention {pressure_convention!r}")
    forms: dict = {}
    flags = {"pressure_convention": pressure_convention}
    if kind in ("E", "E_inf"):
        if pressure_convention == "total" and "pv_total" not in I:
            raise FluxError("the total-pressure form needs the components group")
        pv = I["pv"] if pressure_convention == "fluid" else I["pv_total"]
        val = pv + I["cross"]
        # what the (|u|^2 + |b|^2 + 2p) form gives if p is taken to be the fluid pressure
        forms["fluid_reading_gap"] = (I["pv_misread"] - I["pv"]) / norm
        forms["pressure_velocity"] = pv / norm
        forms["cross"] = I["cross"] / norm
        if kind == "E_inf":
            b = budget_from_integrals(I, norm)
            forms["defect"] = b.defect
            val = val - b.defect * norm
    elif kind == "V":
        if "V" not in I:
            raise FluxError("component integrals were not accumulated")
        val = I["V"]
    else:
        val = I[f"{kind}_bdry"]
        forms["boundary"] = val / norm
        if f"{kind}_adv" in I:
            forms["advective"] = I[f"{kind}_adv"] / norm
    return FluxSample(element=element, R=R, kind=kind, value=val / norm, normalization=norm, forms=forms, flags=flags)


def flux_total_energy(series: FieldSeries, cutoff: RefinedCutoff, pressure_convention: str = "fluid") -> FluxSample:
    groups = ("budget", "components") if pressure_convention == "total" else ("budget",)
    I = accumulate(series, [cutoff], groups)[0]
    s = sample_from_integrals(I, "E", normalization(series.params, cutoff), cutoff.R, 0, pressure_convention)
    s.flags["time_scale_ok"] = series.params.time_scale_ok
    return s


def flux_component(series: FieldSeries, cutoff: RefinedCutoff, kind: str) -> FluxSample:
    if kind not in KINDS:
        raise FluxError(f"unknown flux kind {kind!r}; expected one of {KINDS}")
    groups = ("budget", "components") if kind in ("u", "b", "p", "ub", "V") else ("budget",)
    I = accumulate(series, [cutoff], groups)[0]
    s = sample_from_integrals(I, kind, normalization(series.params, cutoff), cutoff.R)
    s.flags["time_scale_ok"] = series.params.time_scale_ok
    return s


@dataclass
class StretchingIdentity:
    """Terms of ``V + endpoint = resist*|grad b|^2 term - (time + resist*Laplace term)
    - advection term + tendency`` for a cutoff (unnormalized)."""

    V: float
    dissipation: float
    time_term: float
    laplace_term: float
    advection: float
    endpoint: float
    tendency: float

    @property
    def rhs(self) -> float:
        return self.dissipation - self.time_term - self.laplace_term - self.advection + self.endpoint

    def residual(self, static: bool = False) -> float:
        """Trajectory form (default) or static form, where the tendency replaces the endpoint terms."""
        if static:
            return self.V - (self.dissipation - self.laplace_term - self.advection + self.tendency)
        return self.V - self.rhs


def stretching_identity(series: FieldSeries, cutoff: RefinedCutoff) -> StretchingIdentity:
    I = accumulate(series, [cutoff], ("budget", "components", "stretching"))[0]
    eta = series.params.resist
    return StretchingIdentity(
        V=I["V"], dissipation=eta * I["gb2"], time_term=I["eb_t"], laplace_term=eta * I["eb_lap"],
        advection=I["b_bdry"], endpoint=I["eb_endpoint"], tendency=I["tend"],
    )


def ibp_identities(series: FieldSeries, cutoff: RefinedCutoff) -> dict:
    """Advective and boundary forms of the u, b, p and ub fluxes with their relative gap.

    ``rel_strict`` divides by the larger of the two forms; ``rel`` additionally
    floors the denominator at the budget's largest absolute integrand mass.
    """
    I = accumulate(series, [cutoff], ("budget", "components"))[0]
    mass = _boundary_mass(series, cutoff)
    floor = max(mass.values())
    out = {}
    for k in ("u", "b", "p", "ub"):
        a, bd = I[f"{k}_adv"], I[f"{k}_bdry"]
        # fluxes that vanish by symmetry (or with a round-off pressure) are measured
        # against the largest absolute integrand mass of the budget
        scale = max(abs(a), abs(bd), floor)
        own = max(abs(a), abs(bd))
        out[k] = {
            "advective": a, "boundary": bd, "mass": mass[k],
            "rel": abs(a - bd) / scale if scale > 0 else 0.0,
            "rel_strict": abs(a - bd) / own if own > 0 else 0.0,
        }
    return out


def _boundary_mass(series: FieldSeries, cutoff: RefinedCutoff) -> dict:
    """Space-time integrals of the absolute boundary-form integrands."""
    _, grad, _ = cutoff.analytic()
    gn = np.sqrt(np.sum(grad * grad, 0))
    h3 = series.grid.spacing**3
    acc = dict.fromkeys(("u", "b", "p", "ub"), 0.0)
    prev = None
    for snap in series.snapshots:
        u, b, p = (f[(Ellipsis,) + cutoff.box] for f in (snap.u, snap.b, snap.p))
        un, bn = np.sqrt(np.sum(u * u, 0)), np.sqrt(np.sum(b * b, 0))
        e = abs(float(cutoff.eta(snap.time)[0])) * h3
        vals = {
            "u": 0.5 * e * float(np.sum(un**3 * gn)),
            "b": 0.5 * e * float(np.sum(bn**2 * un * gn)),
            "p": e * float(np.sum(np.abs(p) * un * gn)),
            "ub": e * float(np.sum(np.abs(np.sum(u * b, 0)) * bn * gn)),
        }
        if prev is not None:
            dt = snap.time - prev[0]
            for k in acc:
                acc[k] += 0.5 * dt * (prev[1][k] + vals[k])
        prev = (snap.time, vals)
    return acc


def explicit_boundary_forms(series: FieldSeries, cutoff: RefinedCutoff) -> dict:
    """Boundary-form integrals evaluated with the spectral gradient and Laplacian of psi itself.

    Independent of the divergence transfer used by the accumulator; returns
    unnormalized space-time integrals keyed like the accumulator output.
    """
    grad, lap = cutoff.spectral_derivatives()
    params = series.params
    S, nu, eta = params.coupling, params.visc, params.resist
    h3 = series.grid.spacing**3
    acc: dict = {}
    prev = None
    for snap in series.snapshots:
        u, b, p = snap.u, snap.b, snap.p
        eu, eb, ub = np.sum(u * u, 0), np.sum(b * b, 0), np.sum(u * b, 0)
        ug = np.sum(u * grad, 0)
        bg = np.sum(b * grad, 0)
        e = float(cutoff.eta(snap.time)[0])
        vals = {
            "u_bdry": 0.5 * float(np.sum(eu * ug)),
            "b_bdry": 0.5 * float(np.sum(eb * ug)),
            "p_bdry": float(np.sum(p * ug)),
            "ub_bdry": -float(np.sum(ub * bg)),
            "lap": 0.5 * float(np.sum((nu * eu + S * eta * eb) * lap)),
            "pv": 0.5 * float(np.sum((eu + 2 * S * eb + 2 * p) * ug)),
            "cross": -S * float(np.sum(ub * bg)),
        }
        vals = {k: e * v * h3 for k, v in vals.items()}
        if prev is not None:
            dt = snap.time - prev[0]
            for k in vals:
                acc[k] = acc.get(k, 0.0) + 0.5 * dt * (prev[1][k] + vals[k])
        prev = (snap.time, vals)
    return acc


def density_average(
    series: FieldSeries, cutoffs: Sequence[RefinedCutoff], density: Callable[[Snapshot], np.ndarray] | np.ndarray
) -> np.ndarray:
    """(1/T)(1/R^3) int int f phi for each cutoff; f is an array (time independent) or a callable."""
    T = series.params.time_unit
    out = np.zeros(len(cutoffs))
    prev = None
    h3 = series.grid.spacing**3
    for s in series.snapshots:
        f = density(s) if callable(density) else density
        vals = np.array([float(c.eta(s.time)[0]) * float(np.sum(f[c.box] * c.psi)) * h3 for c in cutoffs])
        if prev is not None:
            out += 0.5 * (s.time - prev[0]) * (prev[1] + vals)
        prev = (s.time, vals)
    return out / np.array([T * c.R**3 for c in cutoffs])


# --- integral-scale diagnostics -------------------------------------------


def scale_diagnostics(
    series: FieldSeries,
    phi0: RefinedCutoff,
    delta: float | None = None,
    C: float = 1.0,
    C_thm6: float = 1.0,
    K1: float = 1.0,
    K2: float = 1.0,
) -> ScaleDiagnostics:
    """Integral-scale energies, enstrophies, Taylor scales and the beta family.

    Structural constants (C, C_thm6) and sup-in-time norms (max over
    snapshots) enter only the beta family.  C_u, C_b, C_p and C_V are always
    evaluated in dimensionless variables.
    """
    params = series.params
    g = series.grid
    delta = phi0.delta if delta is None else delta
    h3 = g.spacing**3
    bx = phi0.box
    vb = (slice(None),) + bx
    psi = phi0.psi
    psid = np.clip(psi, 0, None) ** delta
    wp = np.clip(psi, 0, None) ** (phi0.rho - 0.5)
    T = params.time_unit
    R0 = params.length_unit
    keys = ("eu", "eb", "gu", "gb", "pint")
    acc = dict.fromkeys(keys, 0.0)
    prev = None
    sup_u = sup_b = sup_ul = 0.0
    for s in series.snapshots:
        e, _ = (float(v) for v in phi0.eta(s.time))
        ed = e**delta
        eu = np.sum(s.u * s.u, 0)
        eb = np.sum(s.b * s.b, 0)
        gu = _grad(fft(s.u), g)
        gb = _grad(fft(s.b), g)
        vals = {
            "eu": ed * 0.5 * float(np.sum(eu[bx] * psid)) * h3,
            "eb": ed * 0.5 * float(np.sum(eb[bx] * psid)) * h3,
            "gu": e * float(np.sum(np.sum(gu[(slice(None), slice(None)) + bx] ** 2, (0, 1)) * psi)) * h3,
            "gb": e * float(np.sum(np.sum(gb[(slice(None), slice(None)) + bx] ** 2, (0, 1)) * psi)) * h3,
            "pint": float(np.sum(np.abs(s.p[bx] * wp * e ** (phi0.rho - 0.5)) ** 1.5)) * h3,
        }
        sup_u = max(sup_u, math.sqrt(float(np.sum(eu)) * h3))
        sup_b = max(sup_b, math.sqrt(float(np.sum(eb)) * h3))
        sup_ul = max(sup_ul, math.sqrt(float(np.sum(eu[bx] * psi)) * h3 * e))
        if prev is not None:
            dt = s.time - prev[0]
            for k in keys:
                acc[k] += 0.5 * dt * (prev[1][k] + vals[k])
        prev = (s.time, vals)
    if len(series.snapshots) < 2:
        raise FluxError("at least two snapshots are needed")
    vol = T * R0**3
    dim = params.form == "dimensional"
    e0u, e0b = acc["eu"] / vol, acc["eb"] / vol
    E0u = (params.nu if dim else 1.0) * acc["gu"] / vol
    E0b = (params.eta if dim else 1.0) * acc["gb"] / vol
    if dim:
        # map to dimensionless variables: u* = (T/R0) u, x* = x/R0, t* = t/T
        Re = params.R0**2 / (params.nu * params.T)
        Rm = params.R0**2 / (params.eta * params.T)
        M = math.sqrt(Re * Rm)
        S = 1.0
        fac = params.T / params.R0**2.5
        su, sb, sul = sup_u * fac, sup_b * fac, sup_ul * fac
        pint = acc["pint"] * params.T**2 / params.R0**6
        e0u_s, e0b_s = e0u * params.T**2 / params.R0**2, e0b * params.T**2 / params.R0**2
        E0u_s, E0b_s = E0u * params.T**2 / params.nu, E0b * params.T**2 / params.eta
        Pr = params.nu / params.eta
        tau = math.sqrt(params.nu * _ratio(e0u + e0b, E0u + E0b))
    else:
        Re, Rm, M, S = params.Re, params.Rm, params.M, params.S
        su, sb, sul, pint = sup_u, sup_b, sup_ul, acc["pint"]
        e0u_s, e0b_s, E0u_s, E0b_s = e0u, e0b, E0u, E0b
        Pr = Rm / Re
        tau = math.sqrt(_ratio(e0u + e0b, E0u + E0b)) * R0
    tu = _ratio(e0u_s, E0u_s) ** 0.25
    tb = _ratio(e0b_s, E0b_s) ** 0.25
    C_p = sul ** (4 / 9) * pint ** (8 / 9)
    C_u = C_thm6 * (C_p * Re ** (4 / 3) + Re + 1 + (M * Rm) ** 2 * su**2 * sb**2)
    C_b = C_thm6 * (Rm ** (4 / 3) * su**4 + Rm + 1)
    C_V = C_thm6 * (su**4 + 2)
    return ScaleDiagnostics(
        e0_u=e0u, e0_b=e0b, E0_u=E0u, E0_b=E0b, tau=tau, tau4=max(tu, tb), tau_b=tb, Pr=Pr,
        Re=Re, Rm=Rm, M=M, S=S, sup_u=su, sup_b=sb, sup_u_local=sul, pressure_integral=pint,
        C=C, C_thm6=C_thm6, K1=K1, K2=K2, delta=delta, rho=phi0.rho,
        beta_total=beta_total(C, K1, K2, Pr), beta_u=beta_quartic(C_u, K1, K2),
        beta_b=beta_quartic(C_b, K1, K2), beta_V=beta_quartic(C_V, K1, K2),
        C_u=C_u, C_b=C_b, C_p=C_p, C_V=C_V, R0=R0, form=params.form,
        time_scale_ok=params.time_scale_ok, n_snapshots=len(series.snapshots),
    )


# --- nondimensionalization --------------------------------------------------


def nondimensionalize(series: FieldSeries) -> FieldSeries:
    """x* = x/R0, t* = t/T, u* = (T/R0) u, b* = (T/R0) b, p* = (T/R0)^2 p."""
    p = series.params
    if p.form != "dimensional":
        raise ValueError("series is already dimensionless")
    R0, T = p.R0, p.T
    v = T / R0
    Re = R0**2 / (p.nu * T)
    Rm = R0**2 / (p.eta * T)
    params = replace(p, Re=Re, Rm=Rm, M=math.sqrt(Re * Rm), form="dimensionless")
    grid = Grid(series.grid.N, series.grid.L / R0)
    snaps = [Snapshot(s.time / T, s.u * v, s.b * v, s.p * v**2) for s in series.snapshots]
    forcing = None
    if series.forcing:
        forcing = dict(series.forcing)
        forcing["rate"] = float(forcing.get("rate", 0.1)) * T**3 / R0**2  # volume-mean power density, units L^2/T^3
    return FieldSeries(grid, params, snaps, forcing)


def dimensionalize(series: FieldSeries) -> FieldSeries:
    p = series.params
    if p.form != "dimensionless":
        raise ValueError("series is already dimensional")
    R0, T = p.R0, p.T
    v = R0 / T
    grid = Grid(series.grid.N, series.grid.L * R0)
    snaps = [Snapshot(s.time * T, s.u * v, s.b * v, s.p * v**2) for s in series.snapshots]
    forcing = None
    if series.forcing:
        forcing = dict(series.forcing)
        forcing["rate"] = float(forcing.get("rate", 0.1)) * R0**2 / T**3
    return FieldSeries(grid, replace(p, form="dimensional"), snaps, forcing)


# --- reports ----------------------------------------------------------------


def flux_report(
    samples: Sequence[FluxSample],
    params: PhysParams,
    run_id: str = "",
    R: float | None = None,
    cover_seed: int | None = None,
    pressure_convention: str = "fluid",
) -> dict:
    kinds = sorted({s.kind for s in samples})
    return {
        "run_id": run_id,
        "scale": R if R is not None else (samples[0].R if samples else None),
        "cover_seed": cover_seed,
        "kind": kinds[0] if len(kinds) == 1 else kinds,
        "normalization": "per unit mass: divided by T*R^3",
        "values": [asdict(s) for s in samples],
        "params": params.to_dict(),
        "flags": {"time_scale_ok": params.time_scale_ok, "pressure_convention": pressure_convention},
    }


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))

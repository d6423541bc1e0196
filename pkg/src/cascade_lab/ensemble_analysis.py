"""Ensemble averages over covers, the non-negative-density sandwich, cascade verdicts and locality.

Verdicts are reports: they record which hypotheses hold (flags), which
scales fall in the inertial range and where the flux sandwich holds, and
an empirical structural constant.  Two things are asserted because they are
exact: the sandwich for non-negative densities (up to quadrature slack) and
the algebraic locality bound implied by the sandwich at two scales.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .covers_cutoffs import Cover, RefinedCutoff, build_cutoff, integral_cutoff, verify_cutoff
from .flux_engine import (
    FluxSample,
    ScaleDiagnostics,
    SpaceTimeAccumulator,
    budget_from_integrals,
    normalization,
    sample_from_integrals,
)
from .grid_fields import FieldSeries, Grid

LEMMA_SLACK = 1e-10
ROUNDING = 1e-12
THEOREM_KINDS = {"4.1": ("E",), "4.2": ("E_inf",), "5.1": ("u+p",), "6.1": ("u",), "6.2": ("b", "ub"), "8.1": ("V",)}


class EnsembleError(RuntimeError):
    pass


class SandwichViolation(AssertionError):
    pass


class LocalityViolation(AssertionError):
    pass


def _stats(x: Sequence[float]) -> dict:
    a = np.asarray(x, dtype=float)
    if a.size == 0:
        return {"min": None, "max": None, "std": None, "mean": None}
    return {"min": float(a.min()), "max": float(a.max()), "std": float(a.std()), "mean": math.fsum(a) / a.size}


@dataclass
class EnsembleResult:
    R: float
    cover: Cover
    kind: str
    values: list
    mean: float
    spread: dict
    cover_spread: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "R": self.R, "kind": self.kind, "mean": self.mean, "spread": self.spread,
            "cover_spread": self.cover_spread, "cover_seed": self.cover.seed, "n": self.cover.n,
            "values": [s.value for s in self.values],
        }


def element_cutoffs(
    cover: Cover, grid: Grid, T: float, rho: float = 7 / 8, delta: float = 7 / 8,
    window: str = "refined", verify: bool = True,
) -> list[RefinedCutoff]:
    cuts = [build_cutoff(c, cover.R, rho, delta, grid, T, R0=cover.R0, window=window) for c in cover.centers]
    if verify:
        for i, c in enumerate(cuts):
            chk = verify_cutoff(c)
            if not chk.passed:
                raise EnsembleError(f"cutoff of element {i} at R={cover.R:.4g} failed verification: {chk}")
    return cuts


def _kind_value(I: dict, kind: str, norm: float, R: float, i: int, convention: str) -> FluxSample:
    if kind == "u+p":
        su = sample_from_integrals(I, "u", norm, R, i)
        sp = sample_from_integrals(I, "p", norm, R, i)
        return FluxSample(i, R, kind, su.value + sp.value, norm, {"u": su.value, "p": sp.value})
    return sample_from_integrals(I, kind, norm, R, i, convention)


def ensemble_scan(
    series: FieldSeries,
    covers: Sequence[Cover],
    kinds: Sequence[str] = ("E",),
    rho: float = 7 / 8,
    delta: float = 7 / 8,
    window: str = "refined",
    pressure_convention: str = "fluid",
    verify: bool = True,
) -> list[dict]:
    """One pass over the snapshots for every element of every cover.

    Returns, per cover, ``{kind: EnsembleResult}`` plus the per-element
    budgets under the key ``"budget"``.
    """
    params = series.params
    T = params.time_unit
    all_cuts, owner = [], []
    for ci, cov in enumerate(covers):
        cuts = element_cutoffs(cov, series.grid, T, rho, delta, window, verify)
        all_cuts.extend(cuts)
        owner.extend([ci] * len(cuts))
    groups = {"budget"}
    if pressure_convention == "total" or any(k not in ("E", "E_inf") for k in kinds):
        groups.add("components")
    acc = SpaceTimeAccumulator(series.grid, params, all_cuts, groups, series.forcing)
    for s in series.snapshots:
        acc.add(s)
    integrals = acc.integrals()
    out = []
    for ci, cov in enumerate(covers):
        idx = [j for j, o in enumerate(owner) if o == ci]
        res: dict = {"budget": []}
        for kind in kinds:
            samples = []
            for i, j in enumerate(idx):
                norm = normalization(params, all_cuts[j])
                samples.append(_kind_value(integrals[j], kind, norm, cov.R, i, pressure_convention))
            vals = [s.value for s in samples]
            res[kind] = EnsembleResult(cov.R, cov, kind, samples, math.fsum(vals) / len(vals), _stats(vals))
        res["budget"] = [budget_from_integrals(integrals[j], normalization(params, all_cuts[j])) for j in idx]
        out.append(res)
    return out


def ensemble_average(
    series: FieldSeries, cover: Cover, kind: str = "E", rho: float = 7 / 8, delta: float = 7 / 8,
    window: str = "refined", pressure_convention: str = "fluid",
) -> EnsembleResult:
    """<F>_R = (1/n) sum_i F_i over the elements of one cover (fixed index order)."""
    return ensemble_scan(series, [cover], (kind,), rho, delta, window, pressure_convention)[0][kind]


def attach_cover_spread(results: Sequence[EnsembleResult]) -> dict:
    """Statistics of the ensemble means across covers at one scale (stored on every result)."""
    means = [r.mean for r in results]
    st = _stats(means)
    st["means"] = means
    st["n_covers"] = len(means)
    for r in results:
        r.cover_spread = st
    return st


# --- non-negative densities -----------------------------------------------


@dataclass
class LemmaReport:
    F0: float
    mean: float
    lower: float
    upper: float
    K1: float
    K2: float
    R: float
    passed: bool
    margin_lower: float
    margin_upper: float


def lemma_sandwich_check(
    density: np.ndarray,
    cover: Cover,
    grid: Grid,
    phi0: RefinedCutoff | None = None,
    cutoffs: Sequence[RefinedCutoff] | None = None,
    T: float = 1.0,
    rho: float = 7 / 8,
    delta: float = 7 / 8,
    strict: bool = True,
) -> list[LemmaReport]:
    """(1/K1) F0 <= <F>_R <= K2 F0 for time-independent non-negative densities.

    ``density`` is one field (N, N, N) or a batch (k, N, N, N).  With a time
    independent density the eta factor is common to both sides and drops
    out.  With ``strict`` a violation beyond the quadrature slack raises
    ``SandwichViolation``.
    """
    f = np.asarray(density, dtype=float)
    if f.ndim == 3:
        f = f[None]
    if f.shape[1:] != grid.shape:
        raise ValueError("density is not on the grid")
    if not np.all(np.isfinite(f)):
        raise ValueError("density must be finite")
    if np.any(f < 0):
        raise ValueError("density must be non-negative")
    phi0 = phi0 if phi0 is not None else integral_cutoff(grid, cover.R0, T, rho, delta)
    cuts = list(cutoffs) if cutoffs is not None else element_cutoffs(cover, grid, T, rho, delta, verify=False)
    k = f.shape[0]
    h3 = grid.spacing**3

    def weighted(c: RefinedCutoff) -> np.ndarray:
        return f[(slice(None),) + c.box].reshape(k, -1) @ c.psi.reshape(-1) * h3

    F0 = weighted(phi0) / cover.R0**3
    local = np.stack([weighted(c) / c.R**3 for c in cuts])
    means = np.array([math.fsum(local[:, j]) / len(cuts) for j in range(k)])
    reports = []
    for j in range(k):
        lo, hi = F0[j] / cover.K1, cover.K2 * F0[j]
        ok = lo * (1 - LEMMA_SLACK) <= means[j] <= hi * (1 + LEMMA_SLACK) + 1e-300
        reports.append(LemmaReport(
            F0=float(F0[j]), mean=float(means[j]), lower=float(lo), upper=float(hi), K1=cover.K1, K2=cover.K2,
            R=cover.R, passed=bool(ok), margin_lower=float(means[j] - lo), margin_upper=float(hi - means[j]),
        ))
        if strict and not ok:
            raise SandwichViolation(f"sandwich violated at R={cover.R:.4g}: {reports[-1]}")
    return reports


# --- cascade verdicts -------------------------------------------------------


def default_scales(R0: float, lower: float = 0.0, count: int = 7) -> list[float]:
    """Half-dyadic ladder R0 2^(-j/2), j = 0..count-1, restricted to [lower, R0]."""
    return [R0 * 2 ** (-j / 2) for j in range(count) if R0 * 2 ** (-j / 2) >= lower * (1 - 1e-12)]


@dataclass
class CascadeVerdict:
    theorem: str
    kind: str
    status: str
    inertial_range: tuple
    scales_tested: list
    E0_ref: float
    K1: float
    K2: float
    per_scale: list
    empirical_constant: float
    constant_name: str
    flags: dict

    @property
    def all_pass(self) -> bool:
        return all(s["pass"] for s in self.per_scale if s["in_range"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["all_pass"] = self.all_pass
        return d


def _e0u_star(diag: ScaleDiagnostics, series: FieldSeries) -> float:
    p = series.params
    if diag.form == "dimensional":
        return diag.e0_u * p.T**2 / p.R0**2
    return diag.e0_u


def cascade_verdict(
    series: FieldSeries,
    diagnostics: ScaleDiagnostics,
    results: dict,
    theorem: str,
    kind: str | None = None,
    defects: dict | None = None,
) -> CascadeVerdict:
    """Evaluate the theorem's sandwich at every tested scale.

    ``results`` maps scale R to the list of EnsembleResults (one per cover)
    for the theorem's flux kind.  The sandwich at scale R is judged on the
    mean over covers; per-cover outcomes are listed alongside.  ``defects``
    optionally maps R to the per-element budget defects, from which the
    regularity proxy is formed.
    """
    if theorem not in THEOREM_KINDS:
        raise ValueError(f"unknown theorem {theorem!r}")
    kind = kind or THEOREM_KINDS[theorem][0]
    K1, K2 = diagnostics.K1, diagnostics.K2
    ref = diagnostics.reference(theorem)
    R0 = diagnostics.R0
    try:
        lower = diagnostics.lower_scale(theorem)
    except ZeroDivisionError:
        lower = math.inf
    empty = not lower < R0
    lo_b, hi_b = ref / (2 * K1), 2 * K2 * ref
    per = []
    for R in sorted(results, reverse=True):
        rs = results[R]
        means = [r.mean for r in rs]
        m = math.fsum(means) / len(means)
        spread = rs[0].cover_spread or _stats(means)
        per.append({
            "R": R, "mean": m, "lower": lo_b, "upper": hi_b,
            "pass": bool(lo_b <= m <= hi_b), "positive": bool(m > 0),
            "cover_pass": [bool(lo_b <= x <= hi_b) for x in means],
            "cover_spread": {k: v for k, v in spread.items() if k != "means"},
            "in_range": bool((not empty) and lower * (1 - 1e-12) <= R <= R0 * (1 + 1e-12)),
        })
    # smallest structural constant for which every failing scale lies below the inertial range
    fails = [s["R"] for s in per if not s["pass"]]
    q = 2.0 if theorem in ("4.1", "4.2") else 4.0
    cname = "C" if theorem in ("4.1", "4.2") else "C_thm6"
    C_now = diagnostics.C if q == 2.0 else diagnostics.C_thm6
    if not fails:
        emp = 0.0
    elif lower == 0 or not math.isfinite(lower):
        emp = math.inf
    else:
        emp = C_now * (max(fails) / lower) ** q
    e0u = _e0u_star(diagnostics, series)
    reg = None
    if defects:
        worst = max(max(abs(d) for d in v) for v in defects.values())
        reg = {"max_defect_over_E0": worst / ref if ref else math.inf, "ok": bool(ref and worst / ref <= 1e-2)}
    flags = {
        "time_scale_ok": bool(series.params.time_scale_ok),
        "e0u_ge_1": bool(e0u >= 1.0),
        "e0u_star": e0u,
        "regularity_proxy": reg,
        "lower_below_R0": not empty,
    }
    return CascadeVerdict(
        theorem=theorem, kind=kind, status="inertial range empty" if empty else "ok",
        inertial_range=(lower, R0), scales_tested=sorted(results, reverse=True), E0_ref=ref, K1=K1, K2=K2,
        per_scale=per, empirical_constant=emp, constant_name=cname, flags=flags,
    )


# --- locality ---------------------------------------------------------------


@dataclass
class LocalityReport:
    K1: float
    K2: float
    E0_ref: float | None
    pairs: list
    skipped: list

    def to_dict(self) -> dict:
        return asdict(self)


def _within(x: float, lo: float, hi: float) -> bool:
    return lo * (1 - ROUNDING) - 1e-300 <= x <= hi * (1 + ROUNDING) + 1e-300


def locality_report(
    means: dict, K1: float, K2: float, E0_ref: float | None = None, assert_implication: bool = True
) -> LocalityReport:
    """Ratios <Psi>_r / <Psi>_R with Psi = R^3 Phi for every ordered pair of scales.

    ``means`` maps scale to the ensemble mean per unit mass.  When ``E0_ref``
    is given, any pair whose two means both lie in the sandwich
    [E0_ref/(2K1), 2K2 E0_ref] must satisfy the derived ratio bound; a
    failure raises ``LocalityViolation``.
    """
    if len(means) < 2:
        raise ValueError("at least two scales are needed")
    pairs, skipped = [], []
    scales = sorted(means)
    for r in scales:
        for R in scales:
            Pr_, PR = r**3 * means[r], R**3 * means[R]
            if PR == 0:
                skipped.append({"r": r, "R": R, "reason": "zero mean at R"})
                continue
            ratio = Pr_ / PR
            x = (r / R) ** 3
            stated = (x / (4 * K1**2), 4 * K2**2 * x)
            derived = (x / (4 * K1 * K2), 4 * K1 * K2 * x)
            entry = {
                "r": r, "R": R, "ratio": ratio, "stated_bound": stated, "derived_bound": derived,
                "stated_pass": _within(ratio, *stated), "derived_pass": _within(ratio, *derived),
            }
            if E0_ref is not None:
                lo, hi = E0_ref / (2 * K1), 2 * K2 * E0_ref
                both = _within(means[r], lo, hi) and _within(means[R], lo, hi)
                entry["both_in_sandwich"] = both
                if both and assert_implication and not entry["derived_pass"]:
                    raise LocalityViolation(f"derived locality bound fails for r={r}, R={R}: {entry}")
            pairs.append(entry)
    return LocalityReport(K1, K2, E0_ref, pairs, skipped)


# --- output -----------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


def write_verdict_csv(path: str | Path, verdicts: Sequence[CascadeVerdict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theorem", "scale", "kind", "mean", "lower_bound", "upper_bound", "pass", "in_range"])
        for v in verdicts:
            for s in v.per_scale:
                w.writerow([v.theorem, repr(s["R"]), v.kind, repr(s["mean"]), repr(s["lower"]), repr(s["upper"]),
                            int(s["pass"]), int(s["in_range"])])

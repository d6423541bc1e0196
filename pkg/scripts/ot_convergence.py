"""Energy-budget defect of an Orszag-Tang run at two resolutions.

Streams every step into a space-time accumulator (nothing is stored), so
N=128 fits in a few hundred MB.  Prints per-element |F_inf|/E0 for the
cover at R0/2 and the N -> 2N reduction factor.

    python scripts/ot_convergence.py --n 64 128 --t-end 0.1
"""

from __future__ import annotations

import argparse
import json
import math
import time

import numpy as np

from cascade_lab.covers_cutoffs import build_cover, build_cutoff, integral_cutoff
from cascade_lab.flux_engine import SpaceTimeAccumulator, budget_from_integrals, normalization
from cascade_lab.grid_fields import make_grid
from cascade_lab.mhd_dns import SolverConfig, run

L = 2 * math.pi
R0 = L / 4


def defects(N: int, t_end: float = 0.1, dt64: float = 0.004, nu: float = 0.01, K: int = 8) -> dict:
    """Per-element |defect| / E0 on the lattice cover of B(0, R0) at R = R0/2."""
    dt = dt64 * 64 / N
    cfg = SolverConfig.from_dict({
        "grid": {"N": N, "L": L},
        "params": {"nu": nu, "eta": nu, "R0": R0, "T": t_end},
        "dt": dt, "t_end": t_end,
        "init": {"u": {"kind": "orszag_tang", "which": "u"}, "b": {"kind": "orszag_tang", "which": "b"}},
    })
    g = make_grid(N, L)
    cover = build_cover(R0, R0 / 2, K, K, "lattice")
    cuts = [integral_cutoff(g, R0, t_end)] + [build_cutoff(c, cover.R, 7 / 8, 7 / 8, g, t_end, R0=R0) for c in cover.centers]
    acc = SpaceTimeAccumulator(g, cfg.params, cuts, {"budget"})
    t0 = time.time()
    run(cfg, callback=acc.add, keep=False)
    I = acc.integrals()
    budgets = [budget_from_integrals(i, normalization(cfg.params, c)) for i, c in zip(I, cuts)]
    E0 = budgets[0].dissipation
    rel = [abs(b.defect) / E0 for b in budgets[1:]]
    return {"N": N, "dt": dt, "E0": E0, "rel_defect": rel, "max": max(rel), "n": cover.n, "seconds": time.time() - t0}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[64, 128])
    ap.add_argument("--t-end", type=float, default=0.1)
    ap.add_argument("--dt64", type=float, default=0.004, help="step at N=64; scaled as 1/N")
    ap.add_argument("--json", default=None)
    a = ap.parse_args()
    res = [defects(N, a.t_end, a.dt64) for N in a.n]
    for r in res:
        print(f"N={r['N']:4d} dt={r['dt']:.2e} E0={r['E0']:.6g} max|F_inf|/E0={r['max']:.3e} ({r['seconds']:.0f}s)")
    for lo, hi in zip(res, res[1:]):
        ratio = np.array(lo["rel_defect"]) / np.array(hi["rel_defect"])
        print(f"N={lo['N']}->{hi['N']}: min per-element reduction {ratio.min():.3g}")
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(res, fh, indent=1)


if __name__ == "__main__":
    main()

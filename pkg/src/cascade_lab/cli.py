"""Configuration-driven pipelines: simulate, verify, analyze, report.

    cascade-lab simulate --config sim.json --output runs/ot
    cascade-lab verify   --config verify.json --output runs/verify
    cascade-lab analyze  --config analyze.json --output runs/ot-analysis
    cascade-lab report   --config report.json --output runs/ot-analysis

Exit codes: 0 success, 1 violated exact property (verify only),
2 configuration or input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import covers_cutoffs as cc
from . import ensemble_analysis as ea
from . import flux_engine as fe
from . import grid_fields as gf
from . import mhd_dns as dns

log = logging.getLogger("cascade_lab")

COMMANDS = ("simulate", "analyze", "verify", "report")
EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class CoverParams:
    R0: float | None = None
    scales: list | None = None
    K1: float = 8.0
    K2: float = 8.0
    covers_per_scale: int = 10
    seed: int = 0
    strategy: str = "jittered_lattice"


@dataclass
class PipelineConfig:
    command: str
    solver: dict | None = None
    snapshots: str | list | None = None
    fixtures: list | None = None
    cover: CoverParams = field(default_factory=CoverParams)
    rho: float = 7 / 8
    delta: float = 7 / 8
    C: float = 1.0
    C_thm6: float = 1.0
    theorems: list = field(default_factory=lambda: ["4.1"])
    snapshot_stride: int = 1
    output: str = "out"
    analysis: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {
    "command": str, "solver": dict, "snapshots": (str, list), "fixtures": list, "cover": dict,
    "rho": (int, float), "delta": (int, float), "C": (int, float), "C_thm6": (int, float),
    "theorems": list, "snapshot_stride": int, "output": str, "analysis": str,
}
_COVER_TYPES = {
    "R0": (int, float), "scales": list, "K1": (int, float), "K2": (int, float),
    "covers_per_scale": int, "seed": int, "strategy": str,
}


def _check_keys(d: dict, types: dict, prefix: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected an object")
    for k, v in d.items():
        path = f"{prefix}{k}"
        if k not in types:
            raise ConfigError(f"{path}: unknown key")
        if v is None:
            continue
        t = types[k]
        if isinstance(v, bool) or not isinstance(v, t):
            names = t.__name__ if isinstance(t, type) else "/".join(x.__name__ for x in t)
            raise ConfigError(f"{path}: expected {names}, got {type(v).__name__}")


def parse_config(d: dict) -> PipelineConfig:
    """Validate a raw config mapping; errors name the offending key path."""
    _check_keys(d, _TYPES, "")
    if "command" not in d:
        raise ConfigError("command: missing")
    if d["command"] not in COMMANDS:
        raise ConfigError(f"command: expected one of {COMMANDS}, got {d['command']!r}")
    cov = d.get("cover") or {}
    _check_keys(cov, _COVER_TYPES, "cover.")
    if cov.get("strategy", "jittered_lattice") not in ("lattice", "jittered_lattice"):
        raise ConfigError("cover.strategy: expected lattice or jittered_lattice")
    for i, s in enumerate(cov.get("scales") or []):
        if isinstance(s, bool) or not isinstance(s, (int, float)) or s <= 0:
            raise ConfigError(f"cover.scales[{i}]: expected a positive number")
    for i, t in enumerate(d.get("theorems") or []):
        if t not in ea.THEOREM_KINDS:
            raise ConfigError(f"theorems[{i}]: unknown theorem {t!r}")
    for k in ("rho", "delta"):
        if k in d and not 0.75 < d[k] < 1:
            raise ConfigError(f"{k}: must lie in (3/4, 1)")
    if d["command"] == "simulate":
        if not d.get("solver"):
            raise ConfigError("solver: required for simulate")
        for k in ("grid", "params", "dt", "t_end"):
            if k not in d["solver"]:
                raise ConfigError(f"solver.{k}: missing")
    if d["command"] == "analyze" and not d.get("snapshots"):
        raise ConfigError("snapshots: required for analyze")
    known = {f.name for f in fields(PipelineConfig)}
    kw = {k: v for k, v in d.items() if k in known and k != "cover" and v is not None}
    return PipelineConfig(cover=CoverParams(**cov), **kw)


def load_config(path: str | Path, command: str | None = None) -> PipelineConfig:
    """Read and validate a JSON config; ``command`` overrides the file's command."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if command is not None and isinstance(raw, dict):
        raw["command"] = command
    return parse_config(raw)


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "crcmod", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: PipelineConfig, artifacts: list[Path], status: int) -> Path:
    """Config, hash, seeds, versions and artifact digests; no timestamps so reruns compare equal."""
    rel = sorted(str(p.relative_to(out)) for p in artifacts)
    m = {
        "command": cfg.command,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seeds": {"cover": cfg.cover.seed},
        "versions": _versions(),
        "exit_status": status,
        "artifacts": {r: _sha(out / r) for r in rel},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    return path


# --- bundled fixtures --------------------------------------------------------

FIXTURES = {
    "abc": {"N": 32, "u": {"kind": "abc", "A": 1.0, "B": 0.8, "C": 0.6},
            "b": {"kind": "random_solenoidal", "seed": 3, "k_max": 3, "energy": 0.3}},
    "shear": {"N": 32, "u": {"kind": "sine_shear", "k": 1, "amplitude": 1.0},
              "b": {"kind": "abc", "A": 0.5, "B": 0.2, "C": 0.1}},
    "orszag_tang": {"N": 32, "u": {"kind": "orszag_tang", "which": "u"}, "b": {"kind": "orszag_tang", "which": "b"}},
}


def fixture_series(name: str, seed: int = 0) -> gf.FieldSeries:
    """Static analytic fields with their pressure; time window disabled by the caller."""
    if name not in FIXTURES:
        raise ConfigError(f"fixtures: unknown fixture {name!r}; known: {sorted(FIXTURES)}")
    spec = FIXTURES[name]
    g = gf.make_grid(spec["N"], 2 * np.pi)
    params = gf.PhysParams(nu=0.01, eta=0.02, R0=np.pi / 2, T=1.0)

    def field_of(s: dict) -> np.ndarray:
        s = dict(s)
        if "seed" in s:
            s["seed"] = s["seed"] + seed
        return gf.project_solenoidal(gf.gen_field(g, s), g)

    u, b = field_of(spec["u"]), field_of(spec["b"])
    p = dns.pressure_from_fields(u, b, g, params.form, params.coupling)
    return gf.static_series(g, params, u, b, p, 3)


# --- commands ----------------------------------------------------------------


def _apply_seed(cfg: PipelineConfig, seed: int | None) -> PipelineConfig:
    if seed is None:
        return cfg
    cfg = copy.deepcopy(cfg)
    cfg.cover.seed = int(seed)
    if cfg.solver:
        for part in (cfg.solver.get("init") or {}).values():
            if isinstance(part, dict) and "seed" in part:
                part["seed"] = int(seed)
    return cfg


def cmd_simulate(cfg: PipelineConfig, out: Path) -> tuple[int, list[Path]]:
    scfg = dns.SolverConfig.from_dict(cfg.solver)
    series = dns.run(scfg, snapshot_stride=cfg.snapshot_stride)
    paths = gf.write_series(out / "series", series)
    return EXIT_OK, paths + [out / "series" / "series.json"]


def _verify_cases(cfg: PipelineConfig) -> list[tuple[str, gf.FieldSeries]]:
    if cfg.snapshots:
        s = gf.read_series(cfg.snapshots)
        return [(str(cfg.snapshots), s)]
    return [(name, fixture_series(name, cfg.cover.seed)) for name in (cfg.fixtures or sorted(FIXTURES))]


def cmd_verify(cfg: PipelineConfig, out: Path) -> tuple[int, list[Path]]:
    """Exact properties: cover bounds, cutoff audits, the sandwich, the integration-by-parts identities."""
    records, ok = [], True

    def record(suite: str, case: str, passed: bool, **detail) -> None:
        nonlocal ok
        ok &= bool(passed)
        records.append({"suite": suite, "case": case, "pass": bool(passed), **detail})
        log.info("%s %s %s", "PASS" if passed else "FAIL", suite, case)

    for name, series in _verify_cases(cfg):
        g = series.grid
        R0 = cfg.cover.R0 or series.params.R0
        T = series.params.time_unit
        phi0 = cc.integral_cutoff(g, R0, T, cfg.rho, cfg.delta)
        fracs = cfg.cover.scales or [1.0, 0.5]
        for frac in fracs:
            R = frac * R0 if frac <= 1 else frac
            cover = cc.build_cover(R0, R, cfg.cover.K1, cfg.cover.K2, cfg.cover.strategy, seed=cfg.cover.seed)
            chk = cc.verify_cover(cover, g)
            record("cover", f"{name} R={R:.4g}", chk.passed, n=cover.n, max_multiplicity=cover.max_multiplicity)
            cuts = ea.element_cutoffs(cover, g, T, cfg.rho, cfg.delta, verify=False)
            bad = [i for i, c in enumerate(cuts) if not cc.verify_cutoff(c).passed]
            record("cutoff_audit", f"{name} R={R:.4g}", not bad, failing_elements=bad)
            dens = np.stack([
                np.sum(series.snapshots[0].u ** 2, 0), np.sum(series.snapshots[0].b ** 2, 0), np.ones(g.shape),
            ])
            reps = ea.lemma_sandwich_check(dens, cover, g, phi0, cuts, T, cfg.rho, cfg.delta, strict=False)
            record("sandwich", f"{name} R={R:.4g}", all(r.passed for r in reps),
                   F0=[r.F0 for r in reps], mean=[r.mean for r in reps])
        static = gf.FieldSeries(g, series.params, series.snapshots, series.forcing)
        for frac in (1.0, 0.5):
            R = frac * R0
            c = (0.0, 0.0, 0.0) if frac == 1.0 else (0.3 * R0, -0.2 * R0, 0.1 * R0)
            cut = cc.build_cutoff(c, R, cfg.rho, cfg.delta, g, T, R0=R0, window="none")
            ids = fe.ibp_identities(static, cut)
            worst = max(v["rel"] for v in ids.values())
            record("ibp_identities", f"{name} R={R:.4g}", worst <= 1e-8, worst_rel=worst)
            st = fe.stretching_identity(static, cut)
            rel = abs(st.residual(static=True)) / max(abs(st.V), 1e-300)
            record("stretching_identity", f"{name} R={R:.4g}", rel <= 1e-8 or abs(st.V) < 1e-14, rel=rel)
        probe = cc.two_grid_probe((0.0, 0.0, 0.0), R0 / 2, cfg.rho, cfg.delta, g, T, R0=R0)
        record("cutoff_refinement", name, bool(probe["stable"]), ratio=probe["ratio"])
    path = out / "verify.jsonl"
    path.write_text("")
    for r in records:
        ea.append_jsonl(path, r)
    return (EXIT_OK if ok else EXIT_VIOLATION), [path]


def _scales(cfg: PipelineConfig, R0: float, lower: float) -> list[float]:
    if cfg.cover.scales:
        return sorted({s * R0 if s <= 1 else s for s in cfg.cover.scales}, reverse=True)
    return ea.default_scales(R0, lower)


def cmd_analyze(cfg: PipelineConfig, out: Path) -> tuple[int, list[Path]]:
    series = gf.read_series(cfg.snapshots)
    g, params = series.grid, series.params
    R0 = cfg.cover.R0 or params.R0
    T = params.time_unit
    phi0 = cc.integral_cutoff(g, R0, T, cfg.rho, cfg.delta)
    diag = fe.scale_diagnostics(series, phi0, cfg.delta, cfg.C, cfg.C_thm6, cfg.cover.K1, cfg.cover.K2)
    jl = out / "analysis.jsonl"
    jl.write_text("")
    ea.append_jsonl(jl, {"record": "diagnostics", **diag.to_dict()})
    verdicts = []
    plan = {}
    for th in cfg.theorems:
        try:
            lower = diag.lower_scale(th)
        except ZeroDivisionError:
            lower = float("inf")
        plan[th] = [R for R in _scales(cfg, R0, lower) if R <= R0 * (1 + 1e-12)]
    all_scales = sorted({R for v in plan.values() for R in v}, reverse=True)
    kinds = sorted({k for th in cfg.theorems for k in ea.THEOREM_KINDS[th]})
    results: dict = {}
    defects: dict = {}
    for R in all_scales:
        covers = [
            cc.build_cover(R0, R, cfg.cover.K1, cfg.cover.K2, cfg.cover.strategy, seed=cfg.cover.seed + j)
            for j in range(cfg.cover.covers_per_scale)
        ]
        scan = ea.ensemble_scan(series, covers, kinds, cfg.rho, cfg.delta)
        results[R] = {k: [s[k] for s in scan] for k in kinds}
        for k in kinds:
            ea.attach_cover_spread(results[R][k])
        defects[R] = [b.defect for s in scan for b in s["budget"]]
    for th in cfg.theorems:
        for kind in ea.THEOREM_KINDS[th]:
            res = {R: results[R][kind] for R in plan[th]}
            v = ea.cascade_verdict(series, diag, res, th, kind, {R: defects[R] for R in plan[th]})
            verdicts.append(v)
            ea.append_jsonl(jl, {"record": "verdict", **v.to_dict()})
            means = {R: v_["mean"] for R, v_ in zip(v.scales_tested, v.per_scale)}
            if len(means) >= 2:
                rep = ea.locality_report(means, diag.K1, diag.K2, v.E0_ref)
                ea.append_jsonl(jl, {"record": "locality", "theorem": th, "kind": kind, **rep.to_dict()})
            else:
                ea.append_jsonl(jl, {"record": "locality", "theorem": th, "kind": kind,
                                     "notice": "fewer than two scales; no locality pairs"})
    csv_path = out / "verdicts.csv"
    ea.write_verdict_csv(csv_path, verdicts)
    return EXIT_OK, [jl, csv_path]


def cmd_report(cfg: PipelineConfig, out: Path) -> tuple[int, list[Path]]:
    src = Path(cfg.analysis) if cfg.analysis else out / "analysis.jsonl"
    if not src.exists():
        raise ConfigError(f"analysis: log not found at {src}")
    records = [json.loads(line) for line in src.read_text().splitlines() if line.strip()]
    summary = {"diagnostics": None, "verdicts": [], "locality": []}
    paths = []
    for r in records:
        kind = r.get("record")
        if kind == "diagnostics":
            summary["diagnostics"] = {k: r[k] for k in ("tau", "tau4", "beta_total", "R0", "form", "Re", "Rm") if k in r}
        elif kind == "verdict":
            summary["verdicts"].append({k: r[k] for k in (
                "theorem", "kind", "status", "inertial_range", "all_pass", "empirical_constant", "flags")})
            dat = out / f"plot_{r['theorem']}_{r['kind'].replace('+', 'p')}.dat"
            with open(dat, "w") as fh:
                fh.write("# R mean lower upper cover_min cover_max\n")
                for s in r["per_scale"]:
                    sp = s["cover_spread"]
                    fh.write(f"{s['R']!r} {s['mean']!r} {s['lower']!r} {s['upper']!r} {sp['min']!r} {sp['max']!r}\n")
            paths.append(dat)
        elif kind == "locality":
            pairs = r.get("pairs", [])
            summary["locality"].append({
                "theorem": r["theorem"], "kind": r["kind"], "pairs": len(pairs),
                "stated_pass": sum(p["stated_pass"] for p in pairs), "derived_pass": sum(p["derived_pass"] for p in pairs),
            })
    sj = out / "summary.json"
    sj.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    sc = out / "summary.csv"
    with open(sc, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theorem", "kind", "status", "all_pass", "empirical_constant"])
        for v in summary["verdicts"]:
            w.writerow([v["theorem"], v["kind"], v["status"], int(v["all_pass"]), v["empirical_constant"]])
    return EXIT_OK, paths + [sj, sc]


HANDLERS = {"simulate": cmd_simulate, "verify": cmd_verify, "analyze": cmd_analyze, "report": cmd_report}


def run_pipeline(cfg: PipelineConfig, output: str | Path | None = None) -> int:
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        status, artifacts = HANDLERS[cfg.command](cfg, out)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (FileNotFoundError, gf.SnapshotFormatError) as e:
        log.error("input error: %s", e)
        return EXIT_CONFIG
    except (dns.CFLError, dns.InstabilityError, dns.DivergenceError) as e:
        log.error("solver error: %s", e)
        return EXIT_SOLVER
    write_manifest(out, cfg, artifacts, status)
    return status


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="cascade-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON pipeline config")
    ap.add_argument("--threads", type=int, default=None, help="FFT workers (default: $CASCADE_LAB_THREADS or 1)")
    ap.add_argument("--output", default=None, help="output directory (overrides config)")
    ap.add_argument("--seed", type=int, default=None, help="cover/initial-condition seed (overrides config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = a.threads if a.threads is not None else int(os.environ.get("CASCADE_LAB_THREADS", "1") or 1)
    gf.set_workers(threads)
    if a.seed is not None and not 0 <= a.seed < 2**64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(a.config, a.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _apply_seed(cfg, a.seed)
    return run_pipeline(cfg, a.output)


if __name__ == "__main__":
    sys.exit(main())

"""(K1, K2)-covers of the integral ball and refined cutoff functions.

Spatial cutoffs are ``psi = sigma(|x - c|)^m`` with ``sigma`` a polynomial
smoothstep (a regularized incomplete beta function) falling from 1 at
radius R to 0 at radius 2R.  Near the outer edge ``sigma ~ (1 - s)^3``, so
the power ``m >= 1/(1 - rho)`` is what keeps ``|grad psi| / psi^rho``
bounded; ``m = 1`` is the negative control.

Elements whose support leaves the integral ball are multiplied by the
integral-domain cutoff ``psi0`` and, outside ``B(0, R0)``, evaluate their
own profile at a softly clamped radial image of the point.  That keeps
``psi <= psi0`` and makes the cover's cutoffs dominate ``psi0`` on the
annulus ``R0 <= |x| < 2 R0`` as well.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import beta as beta_fn
from scipy.special import betainc

from .grid_fields import Grid, fft, ifft

INNER_ORDER = 8
OUTER_ORDER = 3
CLAMP_FRACTION = 0.25  # width of the radial clamp transition, in units of R
RATIO_FLOOR = 1e-300


class InfeasibleCover(ValueError):
    pass


class CutoffError(ValueError):
    pass


# --- 1D profiles ----------------------------------------------------------


def _beta_cdf(s: np.ndarray, a: int, b: int):
    """I_s(a, b) and its first two derivatives, with s clipped to [0, 1]."""
    shape = np.shape(s)
    s = np.asarray(s, dtype=float).reshape(-1)
    I = (s >= 1).astype(float)
    dens = np.zeros_like(I)
    d2 = np.zeros_like(I)
    band = (s > 0) & (s < 1)
    x = s[band]
    I[band] = betainc(a, b, x)
    B = beta_fn(a, b)
    dens[band] = x ** (a - 1) * (1 - x) ** (b - 1) / B
    if a >= 2 and b >= 2:
        # division-free form: no 0 * inf for subnormal x
        d2[band] = x ** (a - 2) * (1 - x) ** (b - 2) * ((a - 1) * (1 - x) - (b - 1) * x) / B
    else:
        d2[band] = dens[band] * ((a - 1) / x - (b - 1) / (1 - x))
    return I.reshape(shape), dens.reshape(shape), d2.reshape(shape)


def falling_profile(s, inner: int = INNER_ORDER, outer: int = OUTER_ORDER):
    """sigma(s): 1 for s <= 0, 0 for s >= 1, monotone and C^2 in between.

    Returns (sigma, dsigma/ds, d2sigma/ds2).
    """
    s = np.asarray(s, dtype=float)
    I, d1, d2 = _beta_cdf(s, inner, outer)
    inside = (s > 0) & (s < 1)
    return 1.0 - I, np.where(inside, -d1, 0.0), np.where(inside, -d2, 0.0)


def rising_profile(s, inner: int = INNER_ORDER, outer: int = OUTER_ORDER):
    """Mirror of ``falling_profile``: 0 for s <= 0, 1 for s >= 1, ``~ s^outer`` at 0."""
    f, d1, d2 = falling_profile(1.0 - np.asarray(s, dtype=float), inner, outer)
    return f, -d1, d2


def cutoff_power(exponent: float) -> int:
    """Smallest integer m with m - 1 - m*exponent >= 0 and m(2 - 2*exponent) - 2 >= 0."""
    if not 0.75 < exponent < 1.0:
        raise CutoffError(f"exponent must lie in (3/4, 1), got {exponent}")
    need = max(1.0 / (1.0 - exponent), 2.0 / (2.0 - 2.0 * exponent))
    return int(math.ceil(need - 1e-9))


def _radial_power(d, R, m, inner=INNER_ORDER, outer=OUTER_ORDER):
    """Sigma(d) = sigma((d - R)/R)^m with derivatives in d."""
    sig, s1, s2 = falling_profile((np.asarray(d) - R) / R, inner, outer)
    if m == 1:
        return sig, s1 / R, s2 / R**2
    pm1 = sig ** (m - 1)
    pm2 = sig ** (m - 2) if m >= 2 else np.zeros_like(sig)
    return sig**m, m * pm1 * s1 / R, (m * (m - 1) * pm2 * s1**2 + m * pm1 * s2) / R**2


def _clamp(r, R0, width, inner=INNER_ORDER):
    """Smooth radial clamp g(r): identity up to R0, saturating at R0 + width/2."""
    t = np.clip((np.asarray(r) - R0) / width, 0.0, 1.0)
    a = inner
    I, d1, _ = _beta_cdf(t, a, a)
    J = t - (t * I - 0.5 * betainc(a + 1, a, t))
    g = np.where(r <= R0, r, R0 + width * J)
    g1 = np.where(r <= R0, 1.0, 1.0 - I)
    g2 = np.where((r <= R0) | (t >= 1), 0.0, -d1 / width)
    return g, g1, g2


# --- covers ---------------------------------------------------------------


@dataclass
class Cover:
    R0: float
    R: float
    centers: np.ndarray
    K1: int
    K2: int
    seed: int = 0
    strategy: str = "lattice"
    max_multiplicity: int = 0
    fills: int = 0

    @property
    def n(self) -> int:
        return len(self.centers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["centers"] = np.asarray(self.centers).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Cover":
        d = dict(d)
        d["centers"] = np.asarray(d["centers"], dtype=float).reshape(-1, 3)
        return cls(**d)


@dataclass
class CoverCheck:
    n: int
    n_lower: float
    n_upper: float
    n_ok: bool
    min_multiplicity: int
    max_multiplicity: int
    coverage_ok: bool
    multiplicity_ok: bool
    centers_ok: bool
    uncovered: list = field(default_factory=list)
    over_covered: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_ok and self.coverage_ok and self.multiplicity_ok and self.centers_ok


def _probe_points(R0: float, R: float, per_R: int, extend: float = 0.0) -> np.ndarray:
    h = R / per_R
    rad = R0 + extend
    m = int(math.ceil(rad / h))
    ax = (np.arange(-m, m + 1) + 0.5) * h
    P = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    P = P[np.einsum("ij,ij->i", P, P) < rad**2]
    # sphere points so the boundary itself is probed
    k = max(64, int(8 * (R0 / R) ** 2 * per_R))
    i = np.arange(k) + 0.5
    phi = np.arccos(1 - 2 * i / k)
    th = math.pi * (1 + 5**0.5) * i
    S = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], -1)
    return np.concatenate([P, S * (R0 * (1 - 1e-12)), S * rad])


def _project_ball(p: np.ndarray, R0: float) -> np.ndarray:
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    return np.where(r > R0, p * (R0 / np.maximum(r, 1e-300)), p)


def _multiplicity(centers: np.ndarray, pts: np.ndarray, R: float, closed: bool) -> np.ndarray:
    tree = cKDTree(centers)
    r = R if closed else R * (1 - 1e-12)
    return np.asarray(tree.query_ball_point(pts, r=r, return_length=True))


def _fill_gaps(centers: np.ndarray, probe: np.ndarray, R: float, R0: float, a: float):
    cov = _multiplicity(centers, probe, R, closed=True)
    gaps = probe[cov == 0]
    added = []
    while len(gaps):
        g = gaps[0]
        cand = _project_ball(np.round(g / a) * a, R0)
        taken = np.min(np.linalg.norm(centers - cand, axis=1)) < 1e-12
        if np.linalg.norm(cand - g) > R or taken:
            cand = _project_ball(g, R0)
        added.append(cand)
        gaps = gaps[np.linalg.norm(gaps - cand, axis=1) > R]
    if added:
        centers = np.vstack([centers, np.array(added)])
    return centers, len(added)


def build_cover(
    R0: float,
    R: float,
    K1: int,
    K2: int,
    strategy: str = "lattice",
    seed: int = 0,
    probe_per_R: int = 8,
    max_tries: int = 50,
) -> Cover:
    """Cover of B(0, R0) by balls of radius R satisfying the (K1, K2) bounds.

    Centres sit on a cubic lattice of spacing R (optionally jittered within
    R/4) clipped to the ball; remaining gaps, including the thin shell out to
    ``R0 + R/8`` that boundary cutoffs rely on, are filled with projected
    lattice points.  Raises ``InfeasibleCover`` naming the violated bound.
    """
    if not 0 < R <= R0:
        raise ValueError("need 0 < R <= R0")
    if K1 < 1 or K2 < 1:
        raise ValueError("K1, K2 must be >= 1")
    if strategy not in ("lattice", "jittered_lattice"):
        raise ValueError(f"unknown strategy {strategy!r}")
    ratio3 = (R0 / R) ** 3
    if R >= R0 * (1 - 1e-12):
        if K1 < 1:
            raise InfeasibleCover("n upper bound K1*(R0/R)^3 < 1")
        return Cover(R0, R, np.zeros((1, 3)), K1, K2, seed, strategy, 1, 0)
    a = R
    m = int(math.ceil(R0 / a)) + 1
    ax = np.arange(-m, m + 1) * a
    lattice = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    probe_ext = _probe_points(R0, R, probe_per_R, extend=CLAMP_FRACTION * R / 2)
    inner = np.linalg.norm(probe_ext, axis=1) < R0
    probe_in = probe_ext[inner]
    rng = np.random.default_rng(seed)
    tries = max_tries if strategy == "jittered_lattice" else 1
    last = ""
    for _ in range(tries):
        pts = lattice.copy()
        if strategy == "jittered_lattice":
            v = rng.standard_normal(pts.shape)
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            pts = pts + v * (R / 4) * rng.random((len(pts), 1)) ** (1 / 3)
        centers = pts[np.linalg.norm(pts, axis=1) <= R0 * (1 + 1e-12)]
        if len(centers) == 0:
            centers = np.zeros((1, 3))
        centers, fills = _fill_gaps(centers, probe_ext, R, R0, a)
        n = len(centers)
        mult = _multiplicity(centers, probe_in, R, closed=False)
        mmax = int(mult.max())
        if n < ratio3 * (1 - 1e-12):
            last = f"n={n} below lower bound (R0/R)^3={ratio3:.4g}"
        elif n > K1 * ratio3 * (1 + 1e-12):
            last = f"n={n} exceeds K1*(R0/R)^3={K1 * ratio3:.4g}"
        elif mmax > K2:
            last = f"local multiplicity {mmax} exceeds K2={K2}"
        else:
            return Cover(R0, R, centers, K1, K2, seed, strategy, mmax, fills)
    raise InfeasibleCover(f"no valid (K1={K1}, K2={K2}) cover at R/R0={R / R0:.4g}: {last}")


def verify_cover(cover: Cover, grid: Grid | None = None, probe_per_R: int = 8) -> CoverCheck:
    """Check Def.-style bounds on the grid points of B(0, R0) (or a probe lattice)."""
    if grid is not None:
        X = grid.mesh.reshape(3, -1).T
        pts = X[np.einsum("ij,ij->i", X, X) < cover.R0**2]
    else:
        pts = _probe_points(cover.R0, cover.R, probe_per_R)
        pts = pts[np.linalg.norm(pts, axis=1) < cover.R0]
    c = np.asarray(cover.centers)
    mult = _multiplicity(c, pts, cover.R, closed=False)
    closed = _multiplicity(c, pts, cover.R, closed=True)
    covered = closed >= 1
    ratio3 = (cover.R0 / cover.R) ** 3
    n = len(c)
    n_ok = ratio3 * (1 - 1e-12) <= n <= cover.K1 * ratio3 * (1 + 1e-12)
    centers_ok = bool(np.all(np.linalg.norm(c, axis=1) <= cover.R0 * (1 + 1e-12)))
    return CoverCheck(
        n=n,
        n_lower=ratio3,
        n_upper=cover.K1 * ratio3,
        n_ok=bool(n_ok),
        min_multiplicity=int(closed.min()) if len(closed) else 0,
        max_multiplicity=int(mult.max()) if len(mult) else 0,
        coverage_ok=bool(np.all(covered)),
        multiplicity_ok=bool(np.all(mult <= cover.K2)),
        centers_ok=centers_ok,
        uncovered=pts[~covered][:10].tolist(),
        over_covered=pts[mult > cover.K2][:10].tolist(),
    )


# --- refined cutoffs --------------------------------------------------------


@dataclass(eq=False)
class RefinedCutoff:
    """Sampled cutoff phi(x, t) = eta(t) psi(x).

    ``psi`` is stored on ``box`` (a tuple of slices covering its support).
    Spectral derivatives of the sampled profile live on the full grid and
    are computed on demand by ``spectral_derivatives``.
    """

    grid: Grid
    center: np.ndarray
    R: float
    rho: float
    delta: float
    m: int
    m_t: int
    T: float
    R0: float
    boundary: bool
    box: tuple
    psi: np.ndarray
    window: str = "refined"
    profile: str = "radial"
    inner: int = INNER_ORDER
    outer: int = OUTER_ORDER
    measured_C0: float | None = None
    _deriv: tuple | None = field(default=None, repr=False)

    def spectral_derivatives(self) -> tuple[np.ndarray, np.ndarray]:
        """Full-grid spectral gradient (3, N, N, N) and Laplacian of the sampled psi."""
        if self._deriv is None:
            g = self.grid
            fh = fft(self.full_psi())
            grad = ifft(np.stack([1j * kk * fh * g.nyquist_mask for kk in g.k]), g)
            self._deriv = (grad, ifft(-g.k2 * fh, g))
        return self._deriv

    def eta(self, t):
        """Temporal profile and its derivative at times t."""
        t = np.asarray(t, dtype=float)
        if self.window == "none":
            return np.ones_like(t), np.zeros_like(t)
        s = (t - self.T / 3) / (self.T / 3)
        r, r1, _ = rising_profile(s, self.inner, self.outer)
        if self.m_t == 1:
            return r, r1 / (self.T / 3)
        return r**self.m_t, self.m_t * r ** (self.m_t - 1) * r1 / (self.T / 3)

    def box_points(self) -> np.ndarray:
        x = self.grid.x
        return np.stack(np.meshgrid(x[self.box[0]], x[self.box[1]], x[self.box[2]], indexing="ij"))

    def full_psi(self) -> np.ndarray:
        out = np.zeros(self.grid.shape)
        out[self.box] = self.psi
        return out

    def analytic(self):
        """psi, gradient (3, ...) and Hessian (3, 3, ...) from closed-form derivatives."""
        X = self.box_points()
        if self.profile == "constant":
            z = np.zeros(X.shape[1:])
            return np.ones_like(z), np.zeros((3,) + z.shape), np.zeros((3, 3) + z.shape)
        return _analytic_psi(X, self.center, self.R, self.m, self.R0, self.boundary, self.inner, self.outer)

    def params(self) -> dict:
        return {
            "center": np.asarray(self.center).tolist(), "R": self.R, "rho": self.rho, "delta": self.delta,
            "m": self.m, "m_t": self.m_t, "T": self.T, "R0": self.R0, "boundary": self.boundary,
            "window": self.window, "inner": self.inner, "outer": self.outer,
        }


def _interior_derivs(X, c, R, m, inner, outer):
    D = X - np.asarray(c, dtype=float).reshape(3, 1, 1, 1)
    d = np.sqrt(np.sum(D * D, 0))
    S, S1, S2 = _radial_power(d, R, m, inner, outer)
    n = D / np.maximum(d, 1e-300)
    grad = S1 * n
    eye = np.eye(3).reshape(3, 3, 1, 1, 1)
    nn = n[:, None] * n[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        tang = np.where(d > 0, S1 / d, 0.0)
    hess = S2 * nn + tang * (eye - nn)
    return S, grad, hess


def _boundary_psi(X, c, R, m, R0, inner=INNER_ORDER, outer=OUTER_ORDER):
    r = np.sqrt(np.sum(X * X, 0))
    A = _radial_power(r, R0, m, inner, outer)[0]
    g = _clamp(r, R0, CLAMP_FRACTION * R, inner)[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = X * np.where(r > R0, g / np.maximum(r, 1e-300), 1.0)
    W = q - np.asarray(c, dtype=float).reshape(3, 1, 1, 1)
    return A * _radial_power(np.sqrt(np.sum(W * W, 0)), R, m, inner, outer)[0]


def _analytic_psi(X, c, R, m, R0, boundary, inner=INNER_ORDER, outer=OUTER_ORDER):
    if not boundary:
        return _interior_derivs(X, c, R, m, inner, outer)
    A, gA, hA = _interior_derivs(X, np.zeros(3), R0, m, inner, outer)
    r = np.sqrt(np.sum(X * X, 0))
    rs = np.maximum(r, 1e-300)
    xh = X / rs
    g, g1, g2 = _clamp(r, R0, CLAMP_FRACTION * R, inner)
    far = r > R0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        G = np.where(far, g / rs, 1.0)
        G1 = np.where(far, (g1 - G) / rs, 0.0)
        G2 = np.where(far, (g2 - 2 * G1) / rs, 0.0)
    q = G * X
    W = q - np.asarray(c, dtype=float).reshape(3, 1, 1, 1)
    d = np.sqrt(np.sum(W * W, 0))
    n = W / np.maximum(d, 1e-300)
    S, S1, S2 = _radial_power(d, R, m, inner, outer)
    s = np.sum(xh * n, 0)
    eye = np.eye(3).reshape(3, 3, 1, 1, 1)
    xx = xh[:, None] * xh[None, :]
    J = G * eye + (r * G1) * xx
    Jn = np.einsum("ij...,j...->i...", J, n)
    gB = S1 * Jn
    P = eye - n[:, None] * n[None, :]
    JPJ = np.einsum("ij...,jk...,kl...->il...", J, P, J)
    Tq = G1 * (n[:, None] * xh[None, :] + xh[:, None] * n[None, :]) + (G2 * r * s) * xx + (G1 * s) * (eye - xx)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = np.where(d > 0, 1.0 / d, 0.0)
    hB = S2 * (Jn[:, None] * Jn[None, :]) + S1 * (inv_d * JPJ + Tq)
    psi = A * S
    grad = A * gB + S * gA
    hess = A * hB + S * hA + gA[:, None] * gB[None, :] + gB[:, None] * gA[None, :]
    return psi, grad, hess


def integral_profile(grid: Grid, R0: float, rho: float = 7 / 8) -> np.ndarray:
    """psi0 on the full grid."""
    m = cutoff_power(rho)
    d = np.sqrt(np.sum(grid.mesh**2, 0))
    return _radial_power(d, R0, m)[0]


def build_cutoff(
    center: Sequence[float],
    R: float,
    rho: float,
    delta: float,
    grid: Grid,
    T: float,
    R0: float | None = None,
    power: int | None = None,
    time_power: int | None = None,
    window: str = "refined",
    margin: int = 1,
    inner: int = INNER_ORDER,
    outer: int = OUTER_ORDER,
) -> RefinedCutoff:
    """Refined cutoff for the cover element B(center, R) inside the integral ball B(0, R0).

    ``R0=None`` builds the integral-domain cutoff itself (centre must be the
    origin).  ``power``/``time_power`` override the exponents derived from
    rho/delta (used for the m = 1 negative control).
    """
    if not (0.75 < rho < 1 and 0.75 < delta < 1):
        raise CutoffError(f"rho and delta must lie in (3/4, 1), got {rho}, {delta}")
    c = np.asarray(center, dtype=float).reshape(3)
    m = power if power is not None else cutoff_power(rho)
    m_t = time_power if time_power is not None else cutoff_power(delta)
    half = grid.L / 2
    if R0 is None:
        R0 = R
    boundary = bool(np.linalg.norm(c) + 2 * R > R0 * (1 + 1e-12))
    if np.allclose(c, 0) and abs(R - R0) <= 1e-12 * R0:
        boundary = False
    if boundary:
        if 2 * R0 > half * (1 + 1e-12):
            raise CutoffError(f"support B(0, 2R0={2 * R0:.4g}) collides with the box boundary {half:.4g}")
    elif np.max(np.abs(c)) + 2 * R > half * (1 + 1e-12):
        raise CutoffError(f"support B(c, 2R) collides with the box boundary {half:.4g}")
    x = grid.x
    h = grid.spacing
    if boundary:
        lo = np.full(3, -2 * R0)
        hi = np.full(3, 2 * R0)
    else:
        lo, hi = c - 2 * R, c + 2 * R
    box = []
    for a in range(3):
        i0 = max(0, int(np.searchsorted(x, lo[a] - margin * h)))
        i1 = min(grid.N, int(np.searchsorted(x, hi[a] + margin * h, side="right")))
        box.append(slice(i0, i1))
    box = tuple(box)
    Xb = np.stack(np.meshgrid(x[box[0]], x[box[1]], x[box[2]], indexing="ij"))
    if boundary:
        psi_b = _boundary_psi(Xb, c, R, m, R0, inner, outer)
        nz = np.nonzero(psi_b)
        if len(nz[0]):
            tight = []
            for a in range(3):
                i0 = max(0, box[a].start + int(nz[a].min()) - margin)
                i1 = min(grid.N, box[a].start + int(nz[a].max()) + 1 + margin)
                tight.append(slice(i0, i1))
            box = tuple(tight)
            Xb = np.stack(np.meshgrid(x[box[0]], x[box[1]], x[box[2]], indexing="ij"))
    D = Xb - c.reshape(3, 1, 1, 1)
    if boundary:
        psi = _boundary_psi(Xb, c, R, m, R0, inner, outer)
    else:
        psi = _radial_power(np.sqrt(np.sum(D * D, 0)), R, m, inner, outer)[0]
    return RefinedCutoff(
        grid=grid, center=c, R=float(R), rho=rho, delta=delta, m=int(m), m_t=int(m_t), T=float(T),
        R0=float(R0), boundary=boundary, box=box, psi=psi, window=window, inner=inner, outer=outer,
    )


def constant_cutoff(grid: Grid, T: float, R: float, R0: float | None = None) -> RefinedCutoff:
    """Degenerate phi = 1 on the whole box with eta = 1 (no decay region)."""
    box = (slice(0, grid.N),) * 3
    return RefinedCutoff(
        grid=grid, center=np.zeros(3), R=float(R), rho=7 / 8, delta=7 / 8, m=1, m_t=1, T=float(T),
        R0=float(R0 if R0 is not None else R), boundary=False, box=box, psi=np.ones(grid.shape),
        window="none", profile="constant",
    )


def cover_cutoffs(
    cover: Cover, grid: Grid, T: float, rho: float = 7 / 8, delta: float = 7 / 8, window: str = "refined"
) -> list[RefinedCutoff]:
    return [build_cutoff(c, cover.R, rho, delta, grid, T, R0=cover.R0, window=window) for c in cover.centers]


def integral_cutoff(
    grid: Grid, R0: float, T: float, rho: float = 7 / 8, delta: float = 7 / 8, window: str = "refined"
) -> RefinedCutoff:
    return build_cutoff(np.zeros(3), R0, rho, delta, grid, T, R0=R0, window=window)


# --- verification ---------------------------------------------------------


@dataclass
class CutoffCheck:
    grad_ratio: float
    hess_ratio: float
    time_ratio: float
    measured_C0: float
    one_on_ball: bool
    support_ok: bool
    bounded: bool
    below_psi0: bool
    inward_gradient: bool
    radial_monotone: bool
    finite: bool
    violations: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (
            self.finite and self.one_on_ball and self.support_ok and self.bounded
            and self.below_psi0 and self.inward_gradient and self.radial_monotone
        )


def _safe_ratio(num, den, mask):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.where(mask, num / np.maximum(den, RATIO_FLOOR), 0.0)
    return float(np.max(r)) if r.size else 0.0


def verify_cutoff(cutoff: RefinedCutoff, n_time: int = 4001) -> CutoffCheck:
    """Scan the three derivative-ratio constraints and the shape contracts.

    Ratios are evaluated with closed-form derivatives wherever the
    denominator profile is positive; ``measured_C0`` is the largest of
    ``R*|d psi|/psi^rho``, ``R^2*|d2 psi|/psi^(2rho-1)`` and ``T*|eta'|/eta^delta``.
    """
    psi, grad, hess = cutoff.analytic()
    R, rho = cutoff.R, cutoff.rho
    pos = psi > 0
    gmax = np.max(np.abs(grad), axis=0)
    hmax = np.max(np.abs(hess).reshape(9, *psi.shape), axis=0)
    grad_ratio = R * _safe_ratio(gmax, psi**rho, pos)
    hess_ratio = R**2 * _safe_ratio(hmax, psi ** (2 * rho - 1), pos)
    t = np.linspace(0.0, cutoff.T, n_time)
    et, ed = cutoff.eta(t)
    time_ratio = cutoff.T * _safe_ratio(np.abs(ed), et**cutoff.delta, et > 0) if cutoff.window != "none" else 0.0
    C0 = max(grad_ratio, hess_ratio, time_ratio)
    viol: dict = {}
    if cutoff.profile == "constant":
        checks = dict(one_on_ball=True, support_ok=True, below_psi0=True, inward_gradient=True, radial_monotone=True)
    else:
        X = cutoff.box_points()
        D = X - cutoff.center.reshape(3, 1, 1, 1)
        d = np.sqrt(np.sum(D * D, 0))
        r = np.sqrt(np.sum(X * X, 0))
        ball = d <= R * (1 - 1e-12)
        if cutoff.boundary:
            ball &= r <= cutoff.R0 * (1 - 1e-12)
        one = bool(np.all(psi[ball] == 1.0))
        if cutoff.boundary:
            outside = r >= 2 * cutoff.R0
        else:
            outside = d >= 2 * R
        support = bool(np.all(psi[outside] == 0.0))
        psi0 = _radial_power(r, cutoff.R0, cutoff.m, cutoff.inner, cutoff.outer)[0]
        below = bool(np.all(psi <= psi0 + 1e-15))
        gnorm = np.sqrt(np.sum(grad**2, 0))
        radial = np.sum(grad * D, 0)
        inward = radial <= 1e-12 * gnorm * d + 1e-300
        inward_ok = bool(np.all(inward))
        if not inward_ok:
            viol["inward"] = int(np.sum(~inward))
        mono = _rays_monotone(cutoff)
        checks = dict(one_on_ball=one, support_ok=support, below_psi0=below, inward_gradient=inward_ok,
                      radial_monotone=mono)
    chk = CutoffCheck(
        grad_ratio=grad_ratio, hess_ratio=hess_ratio, time_ratio=time_ratio, measured_C0=C0,
        bounded=bool(np.all((psi >= 0) & (psi <= 1)) and np.all((et >= 0) & (et <= 1))),
        finite=bool(np.isfinite(C0)), violations=viol, **checks,
    )
    cutoff.measured_C0 = C0
    return chk


def _rays_monotone(cutoff: RefinedCutoff, n_rays: int = 26, n_pts: int = 200) -> bool:
    dirs = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)], float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    s = np.linspace(0, 2 * cutoff.R * (1 + 1e-9), n_pts)
    P = cutoff.center[None, None, :] + s[None, :, None] * dirs[:n_rays, None, :]
    X = P.reshape(-1, 3).T.reshape(3, -1, 1, 1)
    psi = _analytic_psi(X, cutoff.center, cutoff.R, cutoff.m, cutoff.R0, cutoff.boundary, cutoff.inner, cutoff.outer)[0]
    vals = psi.reshape(n_rays, n_pts)
    return bool(np.all(np.diff(vals, axis=1) <= 1e-14))


def two_grid_probe(
    center: Sequence[float], R: float, rho: float, delta: float, grid: Grid, T: float,
    R0: float | None = None, power: int | None = None,
) -> dict:
    """measured C0 on ``grid`` and on the 2x refined grid."""
    fine = Grid(grid.N * 2, grid.L)
    out = {}
    for name, g in (("coarse", grid), ("fine", fine)):
        cut = build_cutoff(center, R, rho, delta, g, T, R0=R0, power=power, time_power=power)
        chk = verify_cutoff(cut)
        out[name] = {"grad": chk.grad_ratio, "hess": chk.hess_ratio, "time": chk.time_ratio, "C0": chk.measured_C0}
    ratio = out["fine"]["C0"] / max(out["coarse"]["C0"], 1e-300)
    spatial = max(out["fine"]["grad"], out["fine"]["hess"]) / max(out["coarse"]["grad"], out["coarse"]["hess"], 1e-300)
    out["ratio"] = ratio
    out["spatial_ratio"] = spatial
    out["stable"] = bool(1 / 1.2 <= ratio <= 1.2)
    out["divergent"] = bool(spatial >= 2.0)
    return out

"""Periodic-box discretization: grids, spectral calculus, test fields, quadrature, snapshots.

The box is ``[-L/2, L/2)^3`` so that balls centred at the origin sit in the
middle of the domain.  Vector fields are plain ``ndarray`` of shape
``(3, N, N, N)`` indexed ``[component, i1, i2, i3]`` with ``i1`` along ``x1``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import crcmod
import numpy as np
import scipy.fft as sfft

MAGIC = b"MHDC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ10d")
_CRC = struct.Struct("<Q")
crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)

_workers = int(os.environ.get("CASCADE_LAB_THREADS", "1") or 1)


def set_workers(n: int) -> None:
    """Set the FFT worker count.  Results do not depend on it."""
    global _workers
    _workers = max(1, int(n))


class GridError(ValueError):
    pass


class SnapshotFormatError(ValueError):
    pass


class ChecksumError(SnapshotFormatError):
    pass


@dataclass(frozen=True)
class Grid:
    N: int
    L: float

    def __post_init__(self):
        if not isinstance(self.N, (int, np.integer)) or self.N < 16 or self.N & (self.N - 1):
            raise GridError(f"N must be a power of two >= 16, got {self.N}")
        if not self.L > 0:
            raise GridError(f"L must be positive, got {self.L}")

    @property
    def spacing(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.N, self.N, self.N)

    @property
    def k0(self) -> float:
        """Fundamental wavenumber 2*pi/L."""
        return 2 * math.pi / self.L

    @cached_property
    def x(self) -> np.ndarray:
        return -self.L / 2 + self.spacing * np.arange(self.N)

    @cached_property
    def mesh(self) -> np.ndarray:
        return np.stack(np.meshgrid(self.x, self.x, self.x, indexing="ij"))

    @cached_property
    def n_int(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer wavevector components, broadcastable to the rfft shape."""
        n = np.fft.fftfreq(self.N, 1.0 / self.N)
        nz = np.fft.rfftfreq(self.N, 1.0 / self.N)
        return n[:, None, None], n[None, :, None], nz[None, None, :]

    @cached_property
    def k(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(c * self.k0 for c in self.n_int)

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky, kz = self.k
        return kx**2 + ky**2 + kz**2

    @cached_property
    def k2_safe(self) -> np.ndarray:
        k2 = self.k2.copy()
        k2[0, 0, 0] = 1.0
        return k2

    @cached_property
    def n_abs(self) -> np.ndarray:
        nx, ny, nz = self.n_int
        return np.sqrt(nx**2 + ny**2 + nz**2)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule on each axis."""
        cut = self.N / 3.0
        nx, ny, nz = self.n_int
        return (np.abs(nx) < cut) & (np.abs(ny) < cut) & (np.abs(nz) < cut)

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        nx, ny, nz = self.n_int
        h = self.N // 2
        return (np.abs(nx) != h) & (np.abs(ny) != h) & (nz != h)

    @cached_property
    def rfft_weight(self) -> np.ndarray:
        """Multiplicity of each rfft coefficient in the full spectrum."""
        w = np.full(self.N // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w[None, None, :]

    @property
    def max_wavenumber(self) -> float:
        return self.N / 2 * self.k0

    def check(self, f: np.ndarray, ncomp: int | None = None) -> None:
        shape = f.shape[-3:]
        if shape != self.shape or (ncomp is not None and (f.ndim != 4 or f.shape[0] != ncomp)):
            raise GridError(f"array of shape {f.shape} does not live on grid N={self.N}")


def make_grid(N: int, L: float) -> Grid:
    return Grid(int(N), float(L))


# --- transforms -----------------------------------------------------------


def fft(f: np.ndarray) -> np.ndarray:
    return sfft.rfftn(f, axes=(-3, -2, -1), workers=_workers)


def ifft(fh: np.ndarray, grid: Grid) -> np.ndarray:
    return sfft.irfftn(fh, s=grid.shape, axes=(-3, -2, -1), workers=_workers)


def project_hat(fh: np.ndarray, grid: Grid) -> np.ndarray:
    # Nyquist planes are dropped: their real-field symmetry is incompatible with k.f = 0
    kx, ky, kz = grid.k
    kdotf = (kx * fh[0] + ky * fh[1] + kz * fh[2]) / grid.k2_safe
    return np.stack([fh[0] - kx * kdotf, fh[1] - ky * kdotf, fh[2] - kz * kdotf]) * grid.nyquist_mask


def project_solenoidal(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Leray projection onto divergence-free fields."""
    grid.check(f, 3)
    return ifft(project_hat(fft(f), grid), grid)


def spectral_derivative(f: np.ndarray, grid: Grid, kind: str) -> np.ndarray:
    """Exact derivative of the trigonometric interpolant.

    ``gradient`` maps a scalar to shape ``(3, N, N, N)``; ``divergence`` a
    vector to a scalar; ``curl`` vector to vector; ``laplacian`` acts
    componentwise on either.
    """
    kx, ky, kz = grid.k
    if kind == "gradient":
        grid.check(f)
        if f.ndim != 3:
            raise GridError("gradient expects a scalar field")
        fh = fft(f)
        return ifft(np.stack([1j * kx * fh, 1j * ky * fh, 1j * kz * fh]), grid)
    if kind == "divergence":
        grid.check(f, 3)
        fh = fft(f)
        return ifft(1j * (kx * fh[0] + ky * fh[1] + kz * fh[2]), grid)
    if kind == "curl":
        grid.check(f, 3)
        fh = fft(f)
        return ifft(
            np.stack(
                [
                    1j * (ky * fh[2] - kz * fh[1]),
                    1j * (kz * fh[0] - kx * fh[2]),
                    1j * (kx * fh[1] - ky * fh[0]),
                ]
            ),
            grid,
        )
    if kind == "laplacian":
        grid.check(f)
        return ifft(-grid.k2 * fft(f), grid)
    raise ValueError(f"unknown derivative kind {kind!r}")


def gradient_tensor(f: np.ndarray, grid: Grid) -> np.ndarray:
    """``out[i, j] = d f_j / d x_i`` for a vector field."""
    grid.check(f, 3)
    fh = fft(f)
    return ifft(np.stack([1j * kk * fh for kk in grid.k]), grid)


# --- quadrature -----------------------------------------------------------


def integrate(density: np.ndarray, grid: Grid) -> float:
    """Rectangle rule on the periodic grid (spectrally accurate for smooth integrands)."""
    density = np.asarray(density, dtype=float)
    if not np.all(np.isfinite(density)):
        raise ValueError("density contains NaN or Inf")
    return float(np.sum(density)) * grid.spacing**3


def spectral_energy(f: np.ndarray, grid: Grid) -> float:
    """integral of |f|^2 evaluated from Fourier coefficients (Parseval)."""
    fh = fft(f)
    return float(np.sum(grid.rfft_weight * np.abs(fh) ** 2)) * grid.L**3 / grid.N**6


# --- test fields ----------------------------------------------------------


def abc_flow(grid: Grid, A: float = 1.0, B: float = 1.0, C: float = 1.0) -> np.ndarray:
    x1, x2, x3 = grid.mesh * grid.k0
    return np.stack(
        [
            A * np.sin(x3) + C * np.cos(x2),
            B * np.sin(x1) + A * np.cos(x3),
            C * np.sin(x2) + B * np.cos(x1),
        ]
    )


def sine_shear(grid: Grid, k: int = 1, amplitude: float = 1.0) -> np.ndarray:
    x2 = grid.mesh[1] * grid.k0
    out = np.zeros((3,) + grid.shape)
    out[0] = amplitude * np.sin(k * x2)
    return out


def orszag_tang(grid: Grid, amplitude: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and magnetic field of the Orszag-Tang vortex (independent of x3)."""
    x1, x2, _ = grid.mesh * grid.k0
    zero = np.zeros(grid.shape)
    u = amplitude * np.stack([-2 * np.sin(x2), 2 * np.sin(x1), zero])
    b = amplitude * np.stack([-2 * np.sin(2 * x2), 2 * np.sin(x1), zero])
    return u, b


def random_solenoidal(
    grid: Grid,
    spectrum_exponent: float = 5 / 3,
    k_min: int = 1,
    k_max: int = 8,
    seed: int = 0,
    energy: float = 0.5,
) -> np.ndarray:
    """Gaussian random solenoidal field with shell energy proportional to k^-exponent.

    Shells are integer bins of |n| (n the integer wavevector).  ``energy`` is
    the volume mean of |u|^2/2.
    """
    if k_max > grid.N // 2:
        raise GridError(f"k_max={k_max} exceeds Nyquist {grid.N // 2}")
    if not 0 < k_min <= k_max:
        raise ValueError("need 0 < k_min <= k_max")
    rng = np.random.default_rng(seed)
    fh = project_hat(fft(rng.standard_normal((3,) + grid.shape)), grid)
    shell = np.rint(grid.n_abs).astype(int)
    keep = (shell >= k_min) & (shell <= k_max) & grid.nyquist_mask
    fh *= keep
    w = grid.rfft_weight
    mode_energy = 0.5 * np.sum(np.abs(fh) ** 2, axis=0) * w / grid.N**6
    shell_e = np.bincount(shell.ravel(), weights=mode_energy.ravel(), minlength=k_max + 1)
    target = np.zeros_like(shell_e)
    ks = np.arange(k_min, k_max + 1)
    target[ks] = ks ** (-float(spectrum_exponent))
    populated = shell_e > 0
    target[~populated] = 0.0
    target *= energy / target.sum()
    scale = np.zeros_like(shell_e)
    scale[populated] = np.sqrt(target[populated] / shell_e[populated])
    fh *= scale[shell]
    return ifft(fh, grid)


def shell_spectrum(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Energy (mean of |f|^2/2) per integer shell of |n|."""
    fh = fft(f)
    shell = np.rint(grid.n_abs).astype(int)
    e = 0.5 * np.sum(np.abs(fh) ** 2, axis=0) * grid.rfft_weight / grid.N**6
    return np.bincount(shell.ravel(), weights=e.ravel())


def gen_field(grid: Grid, spec: dict) -> np.ndarray:
    """Build a divergence-free vector field from a JSON-style spec.

    ``{"kind": "abc", "A":..}``, ``{"kind": "random_solenoidal", ...}``,
    ``{"kind": "orszag_tang", "which": "u"|"b"}``, ``{"kind": "sine_shear", "k": ..}``,
    ``{"kind": "zero"}``.
    """
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "abc":
        return abc_flow(grid, **spec)
    if kind == "random_solenoidal":
        return random_solenoidal(grid, **spec)
    if kind == "sine_shear":
        return sine_shear(grid, **spec)
    if kind == "orszag_tang":
        which = spec.pop("which", "u")
        u, b = orszag_tang(grid, **spec)
        return u if which == "u" else b
    if kind == "zero":
        return np.zeros((3,) + grid.shape)
    raise ValueError(f"unknown field kind {kind!r}")


# --- physical parameters and series ---------------------------------------


@dataclass(frozen=True)
class PhysParams:
    nu: float
    eta: float
    R0: float
    T: float
    Re: float = 1.0
    Rm: float = 1.0
    M: float = 1.0
    form: str = "dimensional"

    def __post_init__(self):
        for name in ("nu", "eta", "R0", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.form not in ("dimensional", "dimensionless"):
            raise ValueError(f"unknown form {self.form!r}")

    @property
    def S(self) -> float:
        return self.M**2 / (self.Re * self.Rm)

    @property
    def Pr(self) -> float:
        return self.nu / self.eta

    @property
    def length_unit(self) -> float:
        """Integral radius R0 expressed in the series' own length unit."""
        return self.R0 if self.form == "dimensional" else 1.0

    @property
    def time_unit(self) -> float:
        """Window length T in the series' own time unit."""
        return self.T if self.form == "dimensional" else 1.0

    @property
    def time_scale_ok(self) -> bool:
        return self.T >= self.R0**2 / self.nu

    # coefficients of the momentum/induction equations in the chosen form
    @property
    def visc(self) -> float:
        return self.nu if self.form == "dimensional" else 1.0 / self.Re

    @property
    def resist(self) -> float:
        return self.eta if self.form == "dimensional" else 1.0 / self.Rm

    @property
    def coupling(self) -> float:
        return 1.0 if self.form == "dimensional" else self.S

    def to_dict(self) -> dict:
        d = asdict(self)
        d["S"] = self.S
        d["Pr"] = self.Pr
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhysParams":
        keys = ("nu", "eta", "R0", "T", "Re", "Rm", "M", "form")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass
class Snapshot:
    time: float
    u: np.ndarray
    b: np.ndarray
    p: np.ndarray


@dataclass
class FieldSeries:
    grid: Grid
    params: PhysParams
    snapshots: list[Snapshot] = field(default_factory=list)
    forcing: dict | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots])

    def __iter__(self) -> Iterator[Snapshot]:
        return iter(self.snapshots)

    def __len__(self) -> int:
        return len(self.snapshots)

    def validate(self, rtol: float = 1e-12) -> None:
        t = self.times
        if len(t) == 0:
            raise ValueError("empty series")
        if t[0] < 0 or np.any(np.diff(t) <= 0):
            raise ValueError("snapshot times must be non-negative and strictly increasing")
        T = self.params.time_unit
        if abs(t[-1] - T) > rtol * max(1.0, T):
            raise ValueError(f"last snapshot time {t[-1]} != T={T}")
        for s in self.snapshots:
            self.grid.check(s.u, 3)
            self.grid.check(s.b, 3)
            self.grid.check(s.p)
            if abs(np.mean(s.p)) > 1e-10 * max(1.0, np.max(np.abs(s.p))):
                raise ValueError("pressure must have zero spatial mean")


def static_series(
    grid: Grid, params: PhysParams, u: np.ndarray, b: np.ndarray, p: np.ndarray, n_times: int = 2
) -> FieldSeries:
    """Time-independent series on [0, T] (analytic fixtures)."""
    ts = np.linspace(0.0, params.T, n_times)
    return FieldSeries(grid, params, [Snapshot(float(t), u, b, p) for t in ts])


# --- snapshot files -------------------------------------------------------


def _header_dict(grid: Grid, params: PhysParams, time: float) -> dict:
    return {
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "N": grid.N,
        "L": grid.L,
        "time": time,
        "nu": params.nu,
        "eta": params.eta,
        "R0": params.R0,
        "T": params.T,
        "Re": params.Re,
        "Rm": params.Rm,
        "S": params.S,
        "M": params.M,
        "form": params.form,
        "array_order": ["u1", "u2", "u3", "b1", "b2", "b3", "p"],
        "layout": "x-fastest little-endian f64",
    }


def write_snapshot(path: str | os.PathLike, snap: Snapshot, grid: Grid, params: PhysParams) -> None:
    """Write one snapshot plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    head = _HEADER.pack(
        MAGIC, FORMAT_VERSION, grid.N, grid.L, snap.time,
        params.nu, params.eta, params.R0, params.T, params.Re, params.Rm, params.S, params.M,
    )
    arrays = [snap.u[0], snap.u[1], snap.u[2], snap.b[0], snap.b[1], snap.b[2], snap.p]
    crc = crc64(head)
    chunks = [head]
    for a in arrays:
        grid.check(a)
        raw = np.asarray(a, dtype="<f8").ravel(order="F").tobytes()
        crc = crc64(raw, crc)
        chunks.append(raw)
    chunks.append(_CRC.pack(crc))
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(_header_dict(grid, params, snap.time), indent=1))


def read_snapshot(path: str | os.PathLike) -> tuple[Snapshot, Grid, PhysParams]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size + _CRC.size:
        raise SnapshotFormatError("truncated snapshot file")
    magic, version, N, L, t, nu, eta, R0, T, Re, Rm, S, M = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotFormatError(f"unsupported format version {version}")
    n3 = N**3
    expected = _HEADER.size + 7 * n3 * 8 + _CRC.size
    if len(data) != expected:
        raise SnapshotFormatError(f"truncated snapshot file: {len(data)} bytes, expected {expected}")
    (stored,) = _CRC.unpack_from(data, expected - _CRC.size)
    if crc64(data[: expected - _CRC.size]) != stored:
        raise ChecksumError("CRC64 mismatch")
    form = "dimensional"
    side = Path(str(path) + ".json")
    if side.exists():
        form = json.loads(side.read_text()).get("form", form)
    grid = Grid(int(N), L)
    params = PhysParams(nu=nu, eta=eta, R0=R0, T=T, Re=Re, Rm=Rm, M=M, form=form)
    flat = np.frombuffer(data, dtype="<f8", count=7 * n3, offset=_HEADER.size)
    arr = [flat[i * n3:(i + 1) * n3].reshape(grid.shape, order="F").astype(float) for i in range(7)]
    snap = Snapshot(t, np.stack(arr[0:3]), np.stack(arr[3:6]), arr[6])
    return snap, grid, params


def write_series(directory: str | os.PathLike, series: FieldSeries) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(series.snapshots):
        p = directory / f"snap_{i:05d}.mhdc"
        write_snapshot(p, s, series.grid, series.params)
        paths.append(p)
    manifest = {
        "files": [p.name for p in paths],
        "times": [s.time for s in series.snapshots],
        "params": series.params.to_dict(),
        "N": series.grid.N,
        "L": series.grid.L,
        "forcing": series.forcing,
    }
    (directory / "series.json").write_text(json.dumps(manifest, indent=1))
    return paths


def read_series(source: str | os.PathLike | Sequence[str | os.PathLike]) -> FieldSeries:
    """Read a series directory (with ``series.json``) or an explicit list of snapshot files."""
    forcing = None
    if isinstance(source, (str, os.PathLike)) and Path(source).is_dir():
        d = Path(source)
        meta = json.loads((d / "series.json").read_text())
        files: Iterable[Path] = [d / f for f in meta["files"]]
        forcing = meta.get("forcing")
    elif isinstance(source, (str, os.PathLike)):
        files = [Path(source)]
    else:
        files = [Path(f) for f in source]
    snaps, grid, params = [], None, None
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing snapshot {f}")
        s, g, p = read_snapshot(f)
        if grid is not None and g != grid:
            raise GridError(f"{f} is on a different grid")
        grid, params = g, p
        snaps.append(s)
    snaps.sort(key=lambda s: s.time)
    return FieldSeries(grid, params, snaps, forcing)


def with_params(series: FieldSeries, **changes) -> FieldSeries:
    return FieldSeries(series.grid, replace(series.params, **changes), series.snapshots, series.forcing)

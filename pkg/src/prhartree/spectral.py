"""Periodic 3D grid, Fourier multipliers and the truncated Coulomb form.

Fields are plain ``float64`` arrays of shape ``(n, n, n)`` indexed as
``f[ix, iy, iz]`` and sampled at ``x_j = -L/2 + j*h``, so the origin sits at
index ``n // 2``.  The forward transform uses the kernel ``exp(-2*pi*i*s.x)``
with wavevectors ``s = k/L``; every symbol is therefore a function of
``|2*pi*s|``.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.fft as sfft
from scipy.integrate import quad
from scipy.special import erfc, kve

Symbol = Callable[[np.ndarray], np.ndarray]

BOUNDARIES = ("periodic", "image", "free")


class BoundaryLeakWarning(UserWarning):
    """Density or maximum too close to the periodic box boundary."""


def relativistic_symbol(m: float) -> Symbol:
    """Symbol of sqrt(-Laplacian + m^2)."""
    return lambda k: np.sqrt(k * k + m * m)


def half_laplacian_symbol(k: np.ndarray) -> np.ndarray:
    return np.abs(k)


def coulomb_symbol(radius: float) -> Symbol:
    """Fourier symbol of 1/|x| truncated at ``radius``.

    4*pi*(1 - cos(k R))/k^2, with the k -> 0 limit 2*pi*R^2.
    """

    def sym(k):
        k = np.asarray(k, dtype=float)
        out = np.empty_like(k)
        small = k * radius < 1e-4
        ks = k[~small]
        out[~small] = 4.0 * np.pi * (1.0 - np.cos(ks * radius)) / (ks * ks)
        kr2 = (k[small] * radius) ** 2
        # Taylor series of the same expression
        out[small] = 2.0 * np.pi * radius**2 * (1.0 - kr2 / 12.0)
        return out

    return sym


# sum over nonzero n in Z^3 of |n|^-4
EPSTEIN_Z3_AT_2 = 16.532315959761668


@lru_cache(maxsize=64)
def image_coefficient(m: float, box_length: float, shells: int = 20) -> float:
    """Periodic-image defect of the kinetic form for localized fields.

    The off-diagonal kernel of sqrt(-Lap + m^2) is
    ``-m^2 K_2(m r) / (2 pi^2 r^2)`` (``-1/(pi^2 r^4)`` when m = 0).  On a
    periodic box every field also interacts with its images, so the discrete
    form underestimates the free-space one by ``kappa * (int u)^2`` with
    ``kappa`` the sum of the negated kernel over nonzero lattice vectors.
    """
    L = float(box_length)
    if m == 0:
        return EPSTEIN_Z3_AT_2 / (np.pi**2 * L**4)

    def kernel(r):
        # negated kernel at distance L r; kve(2, z) e^-z = K_2(z) without underflow
        z = m * L * r
        return 0.5 * z * z * kve(2, z) * np.exp(-z) / (np.pi**2 * (L * r) ** 4)

    # smooth near/far split: lattice sum for the near part, radial integral
    # for the far part, whose integrand is smooth on the lattice scale; the
    # far weight is below 1e-8 inside the first shell
    r0, width = 0.5 * shells, 0.125 * shells

    def near_weight(r):
        return 0.5 * erfc((r - r0) / width)

    n = np.arange(-shells, shells + 1)
    r = np.sqrt(n[:, None, None] ** 2 + n[None, :, None] ** 2 + n[None, None, :] ** 2).ravel()
    r = r[(r > 0) & (r <= shells)]
    near = float(np.sum(kernel(r) * near_weight(r)))
    far, _ = quad(lambda t: 4.0 * np.pi * t * t * kernel(t) * (1.0 - near_weight(t)), 0.5, np.inf, limit=200)
    return near + far


def _fft_friendly(n: int) -> bool:
    if n % 2:
        return False
    for p in (2, 3, 5):
        while n % p == 0:
            n //= p
    return n == 1


@dataclass(frozen=True)
class Grid:
    """Cubic periodic box with ``n`` points per axis and side ``box_length``."""

    n: int
    box_length: float
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 16 or not _fft_friendly(int(n)):
            raise ValueError(f"n must be an even 5-smooth integer >= 16, got {n!r}")
        if not (np.isfinite(self.box_length) and self.box_length > 0):
            raise ValueError(f"box_length must be positive, got {self.box_length!r}")

    @property
    def spacing(self) -> float:
        return self.box_length / self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.spacing

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays (x, y, z)."""
        a = self.axis
        return a[:, None, None], a[None, :, None], a[None, None, :]

    @property
    def radius(self) -> np.ndarray:
        def build():
            x, y, z = self.coords
            return np.sqrt(x * x + y * y + z * z)

        return self._cached("radius", build)

    @property
    def kmag(self) -> np.ndarray:
        """|2*pi*s| on the half-spectrum layout used by ``rfftn``."""

        def build():
            k = 2.0 * np.pi * sfft.fftfreq(self.n, d=self.spacing)
            kz = 2.0 * np.pi * sfft.rfftfreq(self.n, d=self.spacing)
            return np.sqrt(k[:, None, None] ** 2 + k[None, :, None] ** 2 + kz[None, None, :] ** 2)

        return self._cached("kmag", build)

    # -- transforms -----------------------------------------------------------

    def forward(self, f: np.ndarray) -> np.ndarray:
        # the origin is not at index 0, but a phase cancels in every multiplier
        return sfft.rfftn(f)

    def inverse(self, fk: np.ndarray) -> np.ndarray:
        return sfft.irfftn(fk, s=self.shape)

    def symbol_values(self, sym: Union[Symbol, np.ndarray], key=None) -> np.ndarray:
        if isinstance(sym, np.ndarray):
            return sym
        if key is not None:
            return self._cached(key, lambda: self._evaluate_symbol(sym))
        return self._evaluate_symbol(sym)

    def _evaluate_symbol(self, sym: Symbol) -> np.ndarray:
        vals = np.asarray(sym(self.kmag), dtype=float)
        if vals.shape != self.kmag.shape:
            vals = np.broadcast_to(vals, self.kmag.shape).copy()
        if not np.all(np.isfinite(vals)):
            raise ValueError("multiplier symbol is not finite at every grid wavevector")
        return vals

    def apply_multiplier(self, f: np.ndarray, sym: Union[Symbol, np.ndarray], key=None) -> np.ndarray:
        """Return F^-1(sym(|2 pi s|) F f)."""
        return self.inverse(self.symbol_values(sym, key) * self.forward(f))

    # -- quadratic forms ------------------------------------------------------

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(self.cell_volume * np.vdot(f, g).real)

    def mass(self, u: np.ndarray) -> float:
        return self.inner(u, u)

    def image_coefficient(self, m: float, period: float | None = None) -> float:
        return image_coefficient(float(m), float(period or self.box_length))

    @property
    def padded_n(self) -> int:
        return 3 * self.n // 2

    def _padded_symbol(self, m: float) -> np.ndarray:
        def build():
            N, h = self.padded_n, self.spacing
            k = 2.0 * np.pi * sfft.fftfreq(N, d=h)
            kz = 2.0 * np.pi * sfft.rfftfreq(N, d=h)
            k2 = k[:, None, None] ** 2 + k[None, :, None] ** 2 + kz[None, None, :] ** 2
            return np.sqrt(k2 + m * m)

        return self._cached(("padded_rel", float(m)), build)

    def relativistic(self, u: np.ndarray, m: float, boundary: str = "periodic") -> np.ndarray:
        """sqrt(-Laplacian + m^2) u.

        ``boundary`` selects how the box is closed:

        * ``"periodic"``: the plain torus operator.
        * ``"image"``: adds the rank-one term ``kappa * (int u)`` removing the
          interaction of a localized field with its periodic images.
        * ``"free"``: extends u by zero to a box 3/2 times larger, applies
          the operator there, restricts back and adds the image term of the
          larger period.  This is the free-space operator for box-supported
          fields, so a field that fills the box pays for its jump at the faces.
        """
        if boundary == "periodic":
            return self.apply_multiplier(u, relativistic_symbol(m), key=("rel", float(m)))
        if boundary == "image":
            out = self.apply_multiplier(u, relativistic_symbol(m), key=("rel", float(m)))
            out += self.image_coefficient(m) * self.cell_volume * u.sum()
            return out
        if boundary == "free":
            n, N = self.n, self.padded_n
            fk = sfft.rfftn(u, s=(N, N, N))
            out = sfft.irfftn(self._padded_symbol(m) * fk, s=(N, N, N))[:n, :n, :n]
            out += self.image_coefficient(m, N * self.spacing) * self.cell_volume * u.sum()
            return out
        raise ValueError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")

    def kinetic_form(self, u: np.ndarray, m: float, boundary: str = "periodic") -> float:
        return self.inner(u, self.relativistic(u, m, boundary))

    def half_lap_form(self, u: np.ndarray, boundary: str = "periodic") -> float:
        """int |(-Laplacian)^{1/4} u|^2."""
        return self.kinetic_form(u, 0.0, boundary)

    def h_half_norm_sq(self, u: np.ndarray) -> float:
        """Full H^{1/2} norm with weight (1 + 2 pi |s|)."""
        return self.half_lap_form(u) + self.mass(u)

    def preconditioner(self, f: np.ndarray, m: float, shift: float = 1.0) -> np.ndarray:
        """(sqrt(-Laplacian + m^2) + shift)^-1 f."""
        key = ("prec", float(m), float(shift))
        return self.apply_multiplier(f, lambda k: 1.0 / (np.sqrt(k * k + m * m) + shift), key=key)

    # -- Coulomb --------------------------------------------------------------

    @property
    def coulomb_radius(self) -> float:
        return 0.5 * self.box_length

    def coulomb_potential(self, rho: np.ndarray, check: bool = True) -> np.ndarray:
        """|x|^-1 * rho with the kernel truncated at R = L/2."""
        if check:
            self._check_boundary(rho)
        return self.apply_multiplier(rho, coulomb_symbol(self.coulomb_radius), key="coulomb")

    def coulomb_bilinear(self, f: np.ndarray, g: np.ndarray, check: bool = True) -> float:
        """D(f, g) = int int f(x) g(y) / |x - y|."""
        return self.inner(self.coulomb_potential(f, check=check), g)

    def boundary_fraction(self, rho: np.ndarray) -> float:
        """Fraction of sum |rho| within two cells of the box faces."""
        total = np.abs(rho).sum()
        if total == 0:
            return 0.0
        n = self.n
        inner = np.abs(rho[2 : n - 2, 2 : n - 2, 2 : n - 2]).sum()
        return float((total - inner) / total)

    def _check_boundary(self, rho: np.ndarray) -> None:
        frac = self.boundary_fraction(rho)
        if frac > 1e-3:
            warnings.warn(
                f"{100 * frac:.3g}% of the density lies within 2h of the box boundary",
                BoundaryLeakWarning,
                stacklevel=3,
            )


# -- translation and dilation -------------------------------------------------


def translate(f: np.ndarray, shift) -> np.ndarray:
    """Circular shift by an integer lattice vector: result(x) = f(x - shift*h)."""
    shift = tuple(int(s) for s in shift)
    if len(shift) != 3:
        raise ValueError("shift must have three integer components")
    return np.roll(f, shift, axis=(0, 1, 2))


def _linear_matrix(points: np.ndarray, grid: Grid) -> np.ndarray:
    n, h = grid.n, grid.spacing
    pos = (points + 0.5 * grid.box_length) / h
    mat = np.zeros((points.size, n))
    inside = (points >= -0.5 * grid.box_length) & (points < 0.5 * grid.box_length)
    lo = np.floor(pos).astype(int)
    w = pos - lo
    rows = np.nonzero(inside)[0]
    mat[rows, lo[rows] % n] += 1.0 - w[rows]
    mat[rows, (lo[rows] + 1) % n] += w[rows]
    return mat


def _spectral_matrix(points: np.ndarray, grid: Grid) -> np.ndarray:
    # periodic Dirichlet kernel; the Nyquist mode enters as a cosine
    n, L = grid.n, grid.box_length
    t = points[:, None] - grid.axis[None, :]
    arg = np.pi * t / L
    with np.errstate(divide="ignore", invalid="ignore"):
        mat = np.sin(n * arg) / (n * np.tan(arg))
    mat[np.isclose(np.sin(arg), 0.0, atol=1e-13)] = 1.0
    return mat


def resample_matrix(
    points: np.ndarray, grid: Grid, method: str = "linear", periodic: bool = False
) -> np.ndarray:
    """Matrix evaluating a grid function at 1D ``points`` along one axis.

    Points outside the box evaluate to zero unless ``periodic`` is set, in
    which case the periodic extension is used.
    """
    points = np.asarray(points, dtype=float)
    L = grid.box_length
    if periodic:
        points = (points + 0.5 * L) % L - 0.5 * L
    if method == "linear":
        mat = _linear_matrix(points, grid)
    elif method == "spectral":
        mat = _spectral_matrix(points, grid)
        inside = (points >= -0.5 * L) & (points < 0.5 * L)
        mat[~inside] = 0.0
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    return mat


def separable_resample(f: np.ndarray, mats) -> np.ndarray:
    """Apply one 1D interpolation matrix per axis."""
    out = np.tensordot(mats[0], f, axes=(1, 0))
    out = np.tensordot(mats[1], out, axes=(1, 1)).transpose(1, 0, 2)
    out = np.tensordot(mats[2], out, axes=(1, 2)).transpose(1, 2, 0)
    return out


def sample_affine(
    f: np.ndarray,
    source: Grid,
    target: Grid,
    scale: float,
    center=(0.0, 0.0, 0.0),
    method: str = "linear",
    periodic: bool = False,
) -> np.ndarray:
    """Values of f at ``scale * x + center`` for every target grid point x."""
    mats = [resample_matrix(scale * target.axis + c, source, method, periodic) for c in center]
    return separable_resample(f, mats)


def dilate(
    f: np.ndarray,
    lam: float,
    source: Grid,
    target: Grid | None = None,
    method: str = "linear",
    renormalize: bool = False,
) -> np.ndarray:
    """lam^{3/2} f(lam x) sampled on ``target`` (defaults to ``source``)."""
    if not lam > 0:
        raise ValueError(f"dilation factor must be positive, got {lam!r}")
    target = source if target is None else target
    out = lam**1.5 * sample_affine(f, source, target, lam, method=method)
    if renormalize:
        m_out = target.mass(out)
        if m_out > 0:
            out *= np.sqrt(source.mass(f) / m_out)
    return out


# -- field dumps --------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_field(path, f: np.ndarray, grid: Grid, name: str = "", extra: dict | None = None) -> None:
    """Raw little-endian float64, x fastest, plus a ``.json`` sidecar."""
    path = Path(path)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    raw = np.asarray(f, dtype="<f8").ravel(order="F").tobytes()
    meta = {"n": grid.n, "box_length": grid.box_length, "name": name}
    if extra:
        meta.update(extra)
    _atomic_write(path, raw)
    _atomic_write(path.with_suffix(path.suffix + ".json"), json.dumps(meta, indent=2).encode())


def load_field(path) -> tuple[np.ndarray, Grid, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    grid = Grid(int(meta["n"]), float(meta["box_length"]))
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != grid.n**3:
        raise ValueError(f"{path}: expected {grid.n**3} values, found {raw.size}")
    f = raw.reshape(grid.shape, order="F").astype(float)
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{path}: non-finite values")
    return f, grid, meta

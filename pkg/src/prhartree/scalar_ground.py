"""Ground state Q of sqrt(-Laplacian) Q + Q = (|x|^-1 * Q^2) Q and a* = ||Q||^2.

Q is found by minimizing the Weinstein-type quotient
``W(u) = half_lap(u) * mass(u) / D(u^2, u^2)``.  Because the discrete ``W`` is
only approximately scale invariant, the descent works on the equivalent
scale-pinned quotient ``(half_lap(u) + 1) / sqrt(D)`` over unit-mass fields;
both have the same minimizers up to dilation and the second one fixes the
dilation at ``half_lap(u) = mass(u)``.  A closed-form rescale ``a * u(b x)``
then enforces ``half_lap(Q) = mass(Q) = D(Q^2, Q^2) / 2`` exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import Grid, load_field, sample_affine, save_field


class ConvergenceError(RuntimeError):
    """Iteration stopped before reaching its tolerance."""

    def __init__(self, message: str, history=()):
        super().__init__(message)
        self.history = list(history)


class CacheWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GroundStateOptions:
    tol: float = 1e-7
    max_iter: int = 400
    step: float = 1.0
    max_step: float = 4.0
    boundary: str = "image"


@dataclass(frozen=True)
class GroundState:
    grid: Grid
    Q: np.ndarray
    a_star: float
    identity_defects: tuple[float, float, float]
    decay_exponent: float
    pohozaev_defect: float
    el_residual: float
    quotient: float
    boundary: str = "image"
    history: list = field(default_factory=list, repr=False)

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.a_star))


def check_tail_resolution(grid: Grid) -> None:
    """Reject boxes too small or too coarse for Q.

    The density model (1+r^2)^-4 at the half-box must fall below 1e-6 of its
    peak and the core must carry at least two points per unit length.
    """
    half = 0.5 * grid.box_length
    tail = (1.0 + half * half) ** -4
    if tail > 1e-6:
        raise ValueError(
            f"box too small for the Q tail: density ratio {tail:.2e} at L/2 = {half:g} exceeds 1e-6"
        )
    if grid.spacing > 0.5:
        raise ValueError(f"grid spacing {grid.spacing:g} too coarse to resolve the core of Q")


def _pieces(grid: Grid, u: np.ndarray, boundary: str):
    au = grid.relativistic(u, 0.0, boundary)
    t = grid.inner(u, au)
    phi = grid.coulomb_potential(u * u, check=False)
    d = grid.inner(phi, u * u)
    return au, t, phi, d


def _minimize_quotient(grid: Grid, opts: GroundStateOptions):
    r = grid.radius
    u = (1.0 + r * r) ** -2.0
    u /= np.sqrt(grid.mass(u))
    au, t, phi, d = _pieces(grid, u, opts.boundary)
    val = (t + 1.0) / np.sqrt(d)
    tau = opts.step
    history = []
    for _ in range(opts.max_iter):
        # gradient of the pinned quotient; (A+1)^-1 of it is tangent to the sphere
        g = au + u - ((t + 1.0) / d) * phi * u
        res = np.sqrt(grid.mass(g))
        history.append((t / d, res))
        if res < opts.tol:
            return u, history
        direction = grid.preconditioner(g, 0.0, shift=1.0)
        while True:
            v = np.abs(u - tau * direction)
            v /= np.sqrt(grid.mass(v))
            au2, t2, phi2, d2 = _pieces(grid, v, opts.boundary)
            val2 = (t2 + 1.0) / np.sqrt(d2)
            if val2 <= val + 1e-15 or tau < 1e-10:
                break
            tau *= 0.5
        u, au, t, phi, d, val = v, au2, t2, phi2, d2, val2
        tau = min(1.5 * tau, opts.max_step)
    raise ConvergenceError(
        f"quotient descent did not reach residual {opts.tol:g} in {opts.max_iter} iterations",
        history,
    )


def rescale_to_identities(grid: Grid, u: np.ndarray, boundary: str = "image") -> np.ndarray:
    """a * u(b x) with half_lap = mass = D/2, using periodic spectral resampling."""
    t = grid.half_lap_form(u, boundary)
    mass = grid.mass(u)
    d = grid.coulomb_bilinear(u * u, u * u, check=False)
    # half_lap ~ a^2 b^-2, mass ~ a^2 b^-3, D ~ a^4 b^-5
    b = mass / t
    a = np.sqrt(2.0 * t * b**3 / d)
    return a * sample_affine(u, grid, grid, b, method="spectral", periodic=True)


def identity_defects(grid: Grid, Q: np.ndarray, boundary: str = "image") -> tuple[float, float, float]:
    t = grid.half_lap_form(Q, boundary)
    mass = grid.mass(Q)
    half_d = 0.5 * grid.coulomb_bilinear(Q * Q, Q * Q, check=False)
    return (abs(t - mass) / mass, abs(mass - half_d) / mass, abs(t - half_d) / mass)


def pohozaev_defect(grid: Grid, Q: np.ndarray, boundary: str = "image") -> float:
    """Relative defect of 2 half_lap + 3 mass = (5/2) D."""
    lhs = 2.0 * grid.half_lap_form(Q, boundary) + 3.0 * grid.mass(Q)
    rhs = 2.5 * grid.coulomb_bilinear(Q * Q, Q * Q, check=False)
    return abs(lhs - rhs) / rhs


def el_residual(grid: Grid, Q: np.ndarray, boundary: str = "image") -> float:
    res = grid.relativistic(Q, 0.0, boundary) + Q - grid.coulomb_potential(Q * Q, check=False) * Q
    return float(np.sqrt(grid.mass(res) / grid.mass(Q)))


def spherical_average(grid: Grid, f: np.ndarray, r_min: float, r_max: float):
    """Shell averages of f with shells one grid spacing wide."""
    r = grid.radius
    h = grid.spacing
    edges = np.arange(r_min, r_max + 0.5 * h, h)
    idx = np.digitize(r.ravel(), edges) - 1
    ok = (idx >= 0) & (idx < edges.size - 1)
    counts = np.bincount(idx[ok], minlength=edges.size - 1)
    sums = np.bincount(idx[ok], weights=f.ravel()[ok], minlength=edges.size - 1)
    rsum = np.bincount(idx[ok], weights=r.ravel()[ok], minlength=edges.size - 1)
    keep = counts > 0
    return rsum[keep] / counts[keep], sums[keep] / counts[keep]


def decay_fit(grid: Grid, Q: np.ndarray, window=(0.2, 0.4)) -> tuple[float, float]:
    """Least-squares (slope, intercept) of log Qbar(r) against log r.

    The fit uses the annulus ``window[0]*L <= r <= window[1]*L``.
    """
    L = grid.box_length
    rs, vals = spherical_average(grid, Q, window[0] * L, window[1] * L)
    if rs.size < 3:
        raise ValueError("decay annulus contains fewer than three shells")
    if np.any(vals < 1e-14):
        raise ValueError("tail underflow: spherical averages below 1e-14 in the fit annulus")
    slope, intercept = np.polyfit(np.log(rs), np.log(vals), 1)
    return float(slope), float(intercept)


def _check_moment_order(q: float) -> None:
    if not 0 <= q <= 2.5:
        raise ValueError(f"moment order must lie in [0, 2.5], got {q!r}")


def q_moment(ground: GroundState, q: float) -> float:
    """h^3 sum |x|^q Q^2."""
    _check_moment_order(q)
    g = ground.grid
    return float(g.cell_volume * np.sum(g.radius**q * ground.Q**2))


def moment_tail_estimate(ground: GroundState, q: float) -> float:
    """Mass of |x|^q Q^2 beyond r = L/2 predicted by the fitted power-law tail."""
    _check_moment_order(q)
    g = ground.grid
    slope, intercept = decay_fit(g, ground.Q)
    power = q + 2.0 * slope + 3.0
    if power >= 0:
        return float("inf")
    half = 0.5 * g.box_length
    return float(4.0 * np.pi * np.exp(2.0 * intercept) * half**power / -power)


def solve_Q(grid: Grid, opts: GroundStateOptions | None = None) -> GroundState:
    opts = opts or GroundStateOptions()
    check_tail_resolution(grid)
    u, history = _minimize_quotient(grid, opts)
    Q = np.abs(rescale_to_identities(grid, u, opts.boundary))
    a_star = grid.mass(Q)
    d = grid.coulomb_bilinear(Q * Q, Q * Q, check=False)
    try:
        slope = decay_fit(grid, Q)[0]
    except ValueError:
        slope = float("nan")
    return GroundState(
        grid=grid,
        Q=Q,
        a_star=a_star,
        identity_defects=identity_defects(grid, Q, opts.boundary),
        decay_exponent=slope,
        pohozaev_defect=pohozaev_defect(grid, Q, opts.boundary),
        el_residual=el_residual(grid, Q, opts.boundary),
        quotient=grid.half_lap_form(Q, opts.boundary) * a_star / d,
        boundary=opts.boundary,
        history=history,
    )


# -- disk cache ---------------------------------------------------------------


def cache_path(cache_dir, grid: Grid, opts: GroundStateOptions) -> Path:
    tag = opts.boundary
    return Path(cache_dir) / f"Q_n{grid.n}_L{grid.box_length:g}_tol{opts.tol:g}_{tag}.f64"


def save_ground(path, ground: GroundState, opts: GroundStateOptions) -> None:
    extra = {
        "a_star": ground.a_star,
        "identity_defects": list(ground.identity_defects),
        "decay_exponent": ground.decay_exponent,
        "pohozaev_defect": ground.pohozaev_defect,
        "el_residual": ground.el_residual,
        "quotient": ground.quotient,
        "tol": opts.tol,
        "boundary": opts.boundary,
        "grid": {"n": ground.grid.n, "box_length": ground.grid.box_length},
    }
    save_field(path, ground.Q, ground.grid, name="Q", extra=extra)


def load_ground(path, grid: Grid, opts: GroundStateOptions) -> GroundState:
    Q, g, meta = load_field(path)
    if (
        g != grid
        or float(meta.get("tol", -1)) != opts.tol
        or meta.get("boundary") != opts.boundary
    ):
        raise ValueError("cached ground state has different grid or tolerance")
    a_star = grid.mass(Q)
    if not np.isclose(a_star, float(meta["a_star"]), rtol=1e-10):
        raise ValueError("cached field does not match its recorded a*")
    return GroundState(
        grid=grid,
        Q=Q,
        a_star=a_star,
        identity_defects=tuple(float(x) for x in meta["identity_defects"]),
        decay_exponent=float(meta["decay_exponent"]),
        pohozaev_defect=float(meta["pohozaev_defect"]),
        el_residual=float(meta["el_residual"]),
        quotient=float(meta["quotient"]),
        boundary=opts.boundary,
    )


def load_or_solve(grid: Grid, cache_dir=None, opts: GroundStateOptions | None = None) -> GroundState:
    """Return the cached ground state for ``grid`` or compute and cache it."""
    opts = opts or GroundStateOptions()
    if cache_dir is None:
        return solve_Q(grid, opts)
    path = cache_path(cache_dir, grid, opts)
    if path.exists():
        try:
            return load_ground(path, grid, opts)
        except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
            warnings.warn(f"discarding unusable cache {path.name}: {exc}", CacheWarning, stacklevel=2)
    ground = solve_Q(grid, opts)
    save_ground(path, ground, opts)
    return ground

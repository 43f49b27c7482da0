"""Sweeps of beta toward beta* and checks of the blow-up limits.

Each sweep record holds the minimizer diagnostics at one beta.  By default
every record lives on its own box ``L = box_factor * eps_predicted(beta)``
centered at the selected flattest minimum, so the concentration keeps a
fixed number of grid points per blow-up length; a fixed box is available for
multi-center runs where the concentration point itself is under test.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model, solver
from .model import ModelParams, PotentialSpec, State, TheoryQuantities
from .scalar_ground import GroundState, q_moment
from .spectral import Grid, _atomic_write, dilate, sample_affine


class ResolutionWarning(UserWarning):
    """Sweep schedule truncated because eps would fall below 4h."""


class InsufficientRecordsError(ValueError):
    pass


@dataclass(frozen=True)
class SweepRecord:
    beta: float
    energy: float
    eps_beta: float
    eps_predicted: float
    masses: tuple[float, float]
    d_values: tuple[float, float, float]
    mu_times_eps: float
    z1: tuple[float, float, float]
    z2: tuple[float, float, float]
    profile_err1: float
    profile_err2: float
    max_gap: float
    gap: float = 0.0
    box_length: float = 0.0
    n: int = 0
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True
    h_half_err1: float = 0.0
    h_half_err2: float = 0.0

    def __post_init__(self):
        if not self.eps_beta > 0:
            raise ValueError("eps_beta must be positive")
        if self.energy < -1e-6:
            warnings.warn(f"negative minimum energy {self.energy:.3e} at beta = {self.beta:g}", stacklevel=2)

    @property
    def spacing(self) -> float:
        return self.box_length / self.n if self.n else float("nan")

    @property
    def resolved(self) -> bool:
        return self.eps_beta > 4.0 * self.spacing


CSV_COLUMNS = (
    "beta",
    "energy",
    "eps_beta",
    "eps_predicted",
    "mass1",
    "mass2",
    "D11",
    "D22",
    "D12",
    "mu_times_eps",
    "z1_x",
    "z1_y",
    "z1_z",
    "z2_x",
    "z2_y",
    "z2_z",
    "profile_err1",
    "profile_err2",
    "max_gap",
    "gap",
    "box_length",
    "n",
    "residual",
    "iterations",
    "converged",
    "h_half_err1",
    "h_half_err2",
)


def _row(r: SweepRecord) -> list:
    return [
        r.beta,
        r.energy,
        r.eps_beta,
        r.eps_predicted,
        *r.masses,
        *r.d_values,
        r.mu_times_eps,
        *r.z1,
        *r.z2,
        r.profile_err1,
        r.profile_err2,
        r.max_gap,
        r.gap,
        r.box_length,
        r.n,
        r.residual,
        r.iterations,
        int(r.converged),
        r.h_half_err1,
        r.h_half_err2,
    ]


def records_csv(records: Sequence[SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in _row(r)])
    return buf.getvalue()


def write_records(path, records: Sequence[SweepRecord]) -> None:
    _atomic_write(Path(path), records_csv(records).encode())


def read_records(path) -> list[SweepRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            v = {k: float(x) for k, x in row.items()}
            out.append(
                SweepRecord(
                    beta=v["beta"],
                    energy=v["energy"],
                    eps_beta=v["eps_beta"],
                    eps_predicted=v["eps_predicted"],
                    masses=(v["mass1"], v["mass2"]),
                    d_values=(v["D11"], v["D22"], v["D12"]),
                    mu_times_eps=v["mu_times_eps"],
                    z1=(v["z1_x"], v["z1_y"], v["z1_z"]),
                    z2=(v["z2_x"], v["z2_y"], v["z2_z"]),
                    profile_err1=v["profile_err1"],
                    profile_err2=v["profile_err2"],
                    max_gap=v["max_gap"],
                    gap=v["gap"],
                    box_length=v["box_length"],
                    n=int(v["n"]),
                    residual=v["residual"],
                    iterations=int(v["iterations"]),
                    converged=bool(v["converged"]),
                    h_half_err1=v["h_half_err1"],
                    h_half_err2=v["h_half_err2"],
                )
            )
    return out


# -- schedule and profiles ----------------------------------------------------


def geometric_schedule(beta_s: float, beta0: float, levels: int) -> list[float]:
    """beta_k = beta* - (beta* - beta0) 2^-k for k = 0 .. levels-1."""
    if not beta0 < beta_s:
        raise ValueError("the schedule must start below beta*")
    if levels < 1:
        raise ValueError("levels must be at least 1")
    d0 = beta_s - beta0
    return [beta_s - d0 * 2.0**-k for k in range(levels)]


def rescaled_component(grid: Grid, u: np.ndarray, eps: float, z, target: Grid, method: str = "linear"):
    """w(x) = eps^{3/2} u(eps x + z) sampled on ``target``."""
    half = 0.5 * grid.box_length
    reach = eps * 0.5 * target.box_length
    if any(abs(c) + reach > half + 1e-12 for c in z):
        raise ValueError("rescaled profile window leaves the solver box")
    return eps**1.5 * sample_affine(u, grid, target, eps, center=tuple(z), method=method)


def profile_distance(
    grid: Grid,
    s: State,
    eps: float,
    z1,
    z2,
    gam: float,
    ground: GroundState,
    method: str = "linear",
) -> tuple[tuple[float, float], tuple[float, float]]:
    """L^2 and H^{1/2}-seminorm distances of the rescaled components.

    The targets are ``sqrt(gam) Q / ||Q||`` and ``sqrt(1-gam) Q / ||Q||``.
    Both sides are compared on a window of the rescaled variable that fits in
    the solver box (at most the ground-state box), sampled with ``grid.n``
    points per axis; Q is resampled spectrally, the components with
    ``method``.  Returns ``((l2_1, l2_2), (h_1, h_2))``.
    """
    half = 0.5 * grid.box_length - max(float(np.max(np.abs(z))) for z in (z1, z2))
    if half <= 0:
        raise ValueError("maximum point outside the solver box")
    qg = ground.grid
    width = min(2.0 * half / eps, qg.box_length)
    window = qg if width == qg.box_length and grid.n == qg.n else Grid(grid.n, width)
    base = sample_affine(ground.Q, qg, window, 1.0, method="spectral") / ground.norm
    out_l2, out_h = [], []
    for u, z, c in ((s.u1, z1, math.sqrt(gam)), (s.u2, z2, math.sqrt(1.0 - gam))):
        w = rescaled_component(grid, u, eps, z, window, method)
        diff = w - c * base
        out_l2.append(math.sqrt(window.mass(diff)))
        out_h.append(math.sqrt(max(window.half_lap_form(diff, "free"), 0.0)))
    return (out_l2[0], out_l2[1]), (out_h[0], out_h[1])


# -- the sweep ----------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    n: int = 96
    # box side in units of the predicted eps; ignored when box_length is set
    box_factor: float = 20.0
    box_length: float | None = None
    solver: solver.SolverConfig = field(default_factory=solver.SolverConfig)
    cold_start: bool = True
    profile_method: str = "linear"

    def __post_init__(self):
        if self.box_length is None and not self.box_factor > 0:
            raise ValueError("box_factor must be positive")


@dataclass
class SweepResult:
    records: list
    theory: TheoryQuantities
    origin: tuple[float, float, float]
    cold_start_energy: float | None = None
    truncated: int = 0
    states: list = field(default_factory=list, repr=False)
    grids: list = field(default_factory=list, repr=False)


def _grid_for(config: SweepConfig, eps_pred: float) -> Grid:
    if config.box_length is not None:
        return Grid(config.n, float(config.box_length))
    return Grid(config.n, config.box_factor * eps_pred)


def _gaussian_start(grid: Grid, width: float, gam: float) -> State:
    u = np.exp(-((grid.radius / width) ** 2))
    return State(math.sqrt(gam) * u, math.sqrt(1.0 - gam) * u).normalized(grid)


def _record(grid, rep, beta, theory, ground, origin, config) -> SweepRecord:
    eps = rep.eps_beta
    z1 = np.asarray(rep.maxima[0])
    z2 = np.asarray(rep.maxima[1])
    try:
        l2, hh = profile_distance(
            grid, rep.state, eps, z1, z2, theory.gamma, ground, config.profile_method
        )
    except ValueError:
        l2, hh = (float("nan"),) * 2, (float("nan"),) * 2
    return SweepRecord(
        beta=beta,
        energy=rep.energy,
        eps_beta=eps,
        eps_predicted=theory.epsilon(beta),
        masses=tuple(rep.masses),
        d_values=tuple(rep.d_values),
        mu_times_eps=rep.mu * eps,
        z1=tuple(float(c) for c in z1 + origin),
        z2=tuple(float(c) for c in z2 + origin),
        profile_err1=l2[0],
        profile_err2=l2[1],
        max_gap=float(np.linalg.norm(z1 - z2) / eps),
        gap=theory.beta_star - beta,
        box_length=grid.box_length,
        n=grid.n,
        residual=rep.residual,
        iterations=rep.iterations,
        converged=rep.converged,
        h_half_err1=hh[0],
        h_half_err2=hh[1],
    )


def sweep(
    params: ModelParams,
    potentials: tuple[PotentialSpec, PotentialSpec],
    schedule: Sequence[float],
    ground: GroundState,
    config: SweepConfig | None = None,
    theory: TheoryQuantities | None = None,
    origin=None,
    progress=None,
) -> SweepResult:
    """Warm-started minimizations along ``schedule`` (``params.beta`` is ignored).

    ``origin`` is the box center; it defaults to the first member of Z0 for
    adaptive boxes and to 0 for a fixed box.  Levels whose predicted eps is
    below four grid spacings are dropped with a ``ResolutionWarning``.
    """
    config = config or SweepConfig()
    a_star = ground.a_star
    if theory is None:
        theory = model.theory_quantities(
            params, potentials[0], potentials[1], a_star, lambda q: q_moment(ground, q)
        )
    schedule = [float(b) for b in schedule]
    if any(b >= theory.beta_star for b in schedule):
        raise ValueError("every sweep beta must lie below beta*")
    if any(b2 <= b1 for b1, b2 in zip(schedule, schedule[1:])):
        raise ValueError("the beta schedule must be strictly increasing")
    if origin is None:
        origin = theory.Z0[0].center if config.box_length is None else (0.0, 0.0, 0.0)
    origin = np.asarray(origin, dtype=float)

    kept = []
    for b in schedule:
        eps_pred = theory.epsilon(b)
        g = _grid_for(config, eps_pred)
        if eps_pred <= 4.0 * g.spacing:
            break
        kept.append(b)
    truncated = len(schedule) - len(kept)
    if truncated:
        warnings.warn(
            f"resolution guard dropped {truncated} sweep level(s): predicted eps below 4h",
            ResolutionWarning,
            stacklevel=2,
        )

    result = SweepResult(records=[], theory=theory, origin=tuple(origin), truncated=truncated)
    state, prev_grid = None, None
    for k, b in enumerate(kept):
        eps_pred = theory.epsilon(b)
        g = _grid_for(config, eps_pred)
        V1 = model.potential_field(potentials[0], g, origin)
        V2 = model.potential_field(potentials[1], g, origin)
        p = ModelParams(params.a1, params.a2, b, params.m)
        if state is None:
            start = _gaussian_start(g, eps_pred, theory.gamma)
        elif prev_grid == g:
            start = state
        else:
            lam = prev_grid.box_length / g.box_length
            start = State(
                dilate(state.u1, lam, prev_grid, g, method="spectral"),
                dilate(state.u2, lam, prev_grid, g, method="spectral"),
            )
        rep = solver.minimize(g, start, p, V1, V2, config.solver, a_star=a_star)
        rec = _record(g, rep, b, theory, ground, origin, config)
        result.records.append(rec)
        result.states.append(rep.state)
        result.grids.append(g)
        state, prev_grid = rep.state, g
        if progress is not None:
            progress(k, rec)

    if config.cold_start and kept:
        g = prev_grid
        b = kept[-1]
        V1 = model.potential_field(potentials[0], g, origin)
        V2 = model.potential_field(potentials[1], g, origin)
        p = ModelParams(params.a1, params.a2, b, params.m)
        start = _gaussian_start(g, 2.0 * theory.epsilon(b), theory.gamma)
        rep = solver.minimize(g, start, p, V1, V2, config.solver, a_star=a_star)
        result.cold_start_energy = rep.energy
    return result


# -- fits -----------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r2: float
    target_slope: float
    target_amplitude: float
    # measured over target amplitude at the last record
    amplitude_ratio: float = float("nan")
    n_records: int = 0

    @property
    def slope_error(self) -> float:
        return abs(self.slope - self.target_slope) / abs(self.target_slope)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slope_error"] = self.slope_error
        return d


def _usable(records: Sequence[SweepRecord], min_records: int) -> list[SweepRecord]:
    use = [r for r in records if r.resolved and r.gap > 0]
    if len(use) < min_records:
        raise InsufficientRecordsError(
            f"need at least {min_records} resolved records, got {len(use)}"
        )
    return use


def _loglog(x, y):
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def fit_blowup(records: Sequence[SweepRecord], theory: TheoryQuantities, min_records: int = 5) -> FitResult:
    """Fit log eps_beta against log(beta* - beta) over the resolved records."""
    use = _usable(records, min_records)
    gaps = np.array([r.gap for r in use])
    eps = np.array([r.eps_beta for r in use])
    slope, intercept, r2 = _loglog(gaps, eps)
    q0 = theory.q0
    amp = (2.0 * theory.gamma * (1.0 - theory.gamma) / (q0 * theory.lambda0)) ** (1.0 / (q0 + 1.0))
    last = use[-1]
    return FitResult(
        slope=slope,
        intercept=intercept,
        r2=r2,
        target_slope=1.0 / (q0 + 1.0),
        target_amplitude=amp,
        amplitude_ratio=last.eps_beta / last.eps_predicted,
        n_records=len(use),
    )


def energy_rate(records: Sequence[SweepRecord], theory: TheoryQuantities, min_records: int = 5) -> FitResult:
    """Fit log e(beta) against log(beta* - beta) and compare e / gap^{q0/(q0+1)}."""
    if not theory.q0 > 0:
        raise ValueError("the energy rate needs q0 > 0")
    use = _usable(records, min_records)
    gaps = np.array([r.gap for r in use])
    en = np.array([r.energy for r in use])
    if np.any(en <= 0):
        raise ValueError("energy rate fit needs positive energies")
    slope, intercept, r2 = _loglog(gaps, en)
    q0 = theory.q0
    target = theory.energy_constant()
    last = use[-1]
    return FitResult(
        slope=slope,
        intercept=intercept,
        r2=r2,
        target_slope=q0 / (q0 + 1.0),
        target_amplitude=target,
        amplitude_ratio=last.energy / last.gap ** (q0 / (q0 + 1.0)) / target,
        n_records=len(use),
    )


# -- concentration ----------------------------------------------------------------


@dataclass(frozen=True)
class ConcentrationReport:
    verdict: str
    nearest: tuple[float, float, float]
    distance: float
    tolerance: float
    in_Z0: bool
    gap_decreasing: bool
    max_gaps: tuple[float, ...]

    def to_dict(self) -> dict:
        return asdict(self)


def concentration_check(
    records: Sequence[SweepRecord], theory: TheoryQuantities, ambiguity: float = 0.5
) -> ConcentrationReport:
    """Locate the concentration point of the last record among the centers.

    The verdict is ``"Z0 selected"`` when the nearest center belongs to Z0 and
    lies within ``2h + eps`` of both maxima, ``"wrong center"`` when a
    non-Z0 center is nearest, and ``"inconclusive"`` when the two nearest
    centers are at comparable distance (ratio above ``ambiguity``) or the
    maxima are too far from every center.
    """
    if not records:
        raise ValueError("no sweep records")
    last = records[-1]
    z = 0.5 * (np.asarray(last.z1) + np.asarray(last.z2))
    centers = [np.asarray(c.center) for c in theory.centers]
    dists = np.array([np.linalg.norm(z - c) for c in centers])
    order = np.argsort(dists)
    best = order[0]
    tol = 2.0 * last.spacing + last.eps_beta
    z0_centers = [np.asarray(c.center) for c in theory.Z0]
    in_z0 = any(np.allclose(centers[best], c) for c in z0_centers)
    far = max(np.linalg.norm(np.asarray(last.z1) - centers[best]), np.linalg.norm(np.asarray(last.z2) - centers[best]))
    gaps = tuple(r.max_gap for r in records)
    decreasing = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    ambiguous = len(order) > 1 and dists[best] > ambiguity * dists[order[1]]
    if ambiguous or far > tol and not in_z0:
        verdict = "inconclusive"
    elif not in_z0:
        verdict = "wrong center"
    elif far > tol:
        verdict = "inconclusive"
    else:
        verdict = "Z0 selected"
    return ConcentrationReport(
        verdict=verdict,
        nearest=tuple(float(c) for c in centers[best]),
        distance=float(far),
        tolerance=float(tol),
        in_Z0=bool(in_z0),
        gap_decreasing=decreasing,
        max_gaps=gaps,
    )


# -- invariant diagnostics ------------------------------------------------------


def sweep_diagnostics(result: SweepResult) -> dict:
    """Non-fatal diagnostics of the sweep as plain numbers.

    ``energy_monotone`` checks that e(beta) does not increase along the
    schedule (1e-6 slack); ``d12_ratio`` compares (beta*-beta) D12 / eps at the
    last and first records; ``d_ratio_errors`` are relative errors of the
    eps-rescaled D values against 2 gamma^2 / a*, 2 (1-gamma)^2 / a* and
    2 gamma (1-gamma) / a*.
    """
    rec = result.records
    th = result.theory
    energies = [r.energy for r in rec]
    monotone = all(b <= a + 1e-6 for a, b in zip(energies, energies[1:]))
    g = th.gamma
    targets = (2 * g * g / th.a_star, 2 * (1 - g) ** 2 / th.a_star, 2 * g * (1 - g) / th.a_star)
    last = rec[-1]
    scaled = [d * last.eps_beta for d in last.d_values]
    d_err = [abs(s - t) / t for s, t in zip(scaled, targets)]
    d12 = [r.gap * r.d_values[2] / r.eps_beta for r in rec]
    out = {
        "energy_monotone": monotone,
        "energy_last_over_first": energies[-1] / energies[0] if energies[0] else float("nan"),
        "d_ratio_errors": d_err,
        "d12_ratio": d12[-1] / d12[0] if d12[0] else float("nan"),
        "eps_ratio_last": last.eps_beta / last.eps_predicted,
        "mass_errors": [abs(last.masses[0] - g), abs(last.masses[1] - (1 - g))],
        "mu_eps_error": abs(last.mu_times_eps + 1.0),
        "max_gap_last": last.max_gap,
        "truncated_levels": result.truncated,
    }
    if result.cold_start_energy is not None:
        out["cold_start_energy_difference"] = abs(result.cold_start_energy - last.energy)
    return out


def summary_json(result: SweepResult, fits: dict) -> str:
    body = {
        "theory": {
            "a_star": result.theory.a_star,
            "beta_star": result.theory.beta_star,
            "gamma": result.theory.gamma,
            "q0": result.theory.q0,
            "lambda0": result.theory.lambda0,
            "energy_constant": result.theory.energy_constant(),
        },
        "origin": list(result.origin),
        "diagnostics": sweep_diagnostics(result),
        "fits": {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in fits.items()},
    }
    return json.dumps(body, indent=2, sort_keys=True, default=float)

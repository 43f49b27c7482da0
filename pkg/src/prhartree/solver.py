"""Trial states and the constrained two-component minimizer."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from . import model
from .model import ModelParams, PotentialSpec, State
from .scalar_ground import GroundState
from .spectral import BOUNDARIES, BoundaryLeakWarning, Grid, sample_affine


class LineSearchError(RuntimeError):
    """No step along the descent direction kept the energy from increasing."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class UnboundedRegimeWarning(UserWarning):
    """Parameters outside a1, a2 < a*, beta < beta*: no minimizer exists."""


# -- trial states -------------------------------------------------------------


def _bump(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def cutoff(r: np.ndarray) -> np.ndarray:
    """Smooth radial cutoff: 1 for r <= 1, 0 for r >= 2, monotone between."""
    r = np.asarray(r, dtype=float)
    a, b = _bump(2.0 - r), _bump(r - 1.0)
    return a / (a + b)


@dataclass(frozen=True)
class TrialSpec:
    sigma: float
    theta: float
    x0: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("trial scale sigma must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("mass fraction theta must lie in [0, 1]")
        object.__setattr__(self, "x0", tuple(float(c) for c in self.x0))


def _trial_profile(spec: TrialSpec, ground: GroundState, grid: Grid) -> np.ndarray:
    """cutoff(x - x0) Q(sigma (x - x0)) / ||Q|| on ``grid``."""
    sig = spec.sigma
    q = sample_affine(
        ground.Q, ground.grid, grid, sig, center=tuple(-sig * c for c in spec.x0), method="spectral"
    )
    x, y, z = grid.coords
    cx, cy, cz = spec.x0
    r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2)
    return np.abs(q) * cutoff(r) / ground.norm


def make_trial(spec: TrialSpec, ground: GroundState, grid: Grid) -> tuple[State, float]:
    """Trial pair (sqrt(theta), sqrt(1-theta)) * A sigma^{3/2} phi Q(sigma .) / ||Q||.

    Returns the state and the normalization constant A^2.
    """
    if spec.sigma < 1.0:
        raise ValueError("trial scale sigma must be at least 1")
    if 2.0 / spec.sigma < 4.0 * grid.spacing:
        raise ValueError(
            f"sigma = {spec.sigma:g} under-resolved: the core spans fewer than 4 grid points"
        )
    if max(abs(c) for c in spec.x0) > 0.25 * grid.box_length:
        raise ValueError("trial center must lie inside the half-box")
    if 2.0 + max(abs(c) for c in spec.x0) > 0.5 * grid.box_length:
        raise ValueError("cutoff support does not fit in the box")
    prof = spec.sigma**1.5 * _trial_profile(spec, ground, grid)
    a2 = 1.0 / grid.mass(prof)
    amp = math.sqrt(a2)
    u1 = math.sqrt(spec.theta) * amp * prof
    u2 = math.sqrt(1.0 - spec.theta) * amp * prof
    return State(u1, u2), a2


def trial_energy_curve(
    theta: float,
    x0,
    sigmas: Sequence[float],
    params: ModelParams,
    potentials: tuple[PotentialSpec, PotentialSpec],
    ground: GroundState,
    boundary: str | None = None,
) -> list[tuple[float, float]]:
    """Energies of the trial family, evaluated in the frame y = sigma (x - x0).

    With this change of variables the trial energy is exactly
    ``sigma * [sum kin_{m/sigma}(w_i) - interaction(w)] + sum int V_i(x0 + y/sigma) w_i^2``
    for the fixed profiles ``w_i = c_i A cutoff(y/sigma) Q(y) / ||Q||``, so
    large sigma needs no fine physical grid.
    """
    g = ground.grid
    boundary = ground.boundary if boundary is None else boundary
    x, y, z = g.coords
    r = g.radius
    pts = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    base = ground.Q / ground.norm
    c1, c2 = math.sqrt(theta), math.sqrt(1.0 - theta)
    out = []
    for sig in sigmas:
        if sig < 1.0:
            raise ValueError("trial scale sigma must be at least 1")
        prof = cutoff(r / sig) * base
        prof = prof / math.sqrt(g.mass(prof))
        w1, w2 = c1 * prof, c2 * prof
        scaled = ModelParams(params.a1, params.a2, params.beta, params.m / sig)
        V1 = potentials[0](np.asarray(x0) + pts / sig)
        V2 = potentials[1](np.asarray(x0) + pts / sig)
        zero = np.zeros(g.shape)
        ev = model.evaluate(g, State(w1, w2), scaled, zero, zero, boundary)
        pot = g.inner(V1, w1 * w1) + g.inner(V2, w2 * w2)
        out.append((float(sig), float(sig * ev.energy + pot)))
    return out


UNBOUNDED_VERDICT = "no minimizer (energy unbounded below)"


@dataclass(frozen=True)
class ProbeResult:
    case: str
    theta: float
    x0: tuple[float, float, float]
    curve: list
    decreasing: bool
    min_energy: float
    verdict: str

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "theta": self.theta,
            "x0": list(self.x0),
            "curve": [list(c) for c in self.curve],
            "decreasing": self.decreasing,
            "min_energy": self.min_energy,
            "verdict": self.verdict,
        }


def _zero_of(spec: PotentialSpec, other: PotentialSpec | None = None):
    # prefer a common zero of both potentials
    if other is not None:
        for t in spec.terms:
            if any(np.allclose(t.center, o.center) for o in other.terms):
                return t.center
    return spec.terms[0].center


def probe_nonexistence(
    params: ModelParams,
    potentials: tuple[PotentialSpec, PotentialSpec],
    ground: GroundState,
    sigmas: Sequence[float] | None = None,
    threshold: float = -10.0,
) -> ProbeResult:
    """Trial-energy probe of the three unbounded-below cases.

    ``a1 > a*`` uses theta = 1 at a zero of V1, ``a2 > a*`` uses theta = 0 at
    a zero of V2 and ``beta > beta*`` uses theta = gamma at a common zero.
    The verdict is unbounded when the curve is strictly decreasing in sigma
    and falls below ``threshold``.
    """
    a_star = ground.a_star
    if sigmas is None:
        sigmas = [2.0**k for k in range(1, 11)]
    if params.a1 > a_star:
        case, theta, x0 = "a1 > a*", 1.0, _zero_of(potentials[0])
    elif params.a2 > a_star:
        case, theta, x0 = "a2 > a*", 0.0, _zero_of(potentials[1])
    elif params.a1 < a_star and params.a2 < a_star and params.beta > model.beta_star(params.a1, params.a2, a_star):
        case = "beta > beta*"
        theta = model.gamma(params.a1, params.a2, a_star)
        x0 = _zero_of(potentials[0], potentials[1])
    else:
        raise ValueError("parameters lie in the existence regime or on its boundary; nothing to probe")
    curve = trial_energy_curve(theta, x0, sigmas, params, potentials, ground)
    energies = [e for _, e in curve]
    decreasing = all(b < a for a, b in zip(energies, energies[1:]))
    low = min(energies)
    verdict = UNBOUNDED_VERDICT if decreasing and low < threshold else "inconclusive"
    return ProbeResult(case, float(theta), tuple(float(c) for c in x0), curve, decreasing, float(low), verdict)


# -- minimizer ----------------------------------------------------------------


# iterations without a resolvable energy decrease before giving up
STALL_LIMIT = 5


def random_start(grid: Grid, width: float, theta: float, seed: int = 0, center=(0.0, 0.0, 0.0), noise: float = 0.2) -> State:
    """Gaussian pair with mass split (theta, 1 - theta) and seeded positive noise.

    Each component is ``exp(-|x-center|^2/width^2) * (1 + noise * xi)`` with xi
    uniform on [0, 1), independently per component.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("mass fraction theta must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    x, y, z = grid.coords
    cx, cy, cz = center
    base = np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) / width**2)
    u1 = base * (1.0 + noise * rng.random(grid.shape))
    u2 = base * (1.0 + noise * rng.random(grid.shape))
    u1 *= math.sqrt(theta / grid.mass(u1))
    u2 *= math.sqrt((1.0 - theta) / grid.mass(u2))
    return State(u1, u2)



@dataclass(frozen=True)
class SolverConfig:
    step: float = 1.0
    tol_energy: float = 1e-11
    tol_residual: float = 1e-6
    max_iter: int = 2000
    precondition: bool = True
    # "combined" scales the kinetic preconditioner by (shift/(shift+V))^{1/2}
    # on both sides; "kinetic" is the plain (sqrt(-Lap+m^2)+shift)^-1
    preconditioner: str = "combined"
    # "sd": preconditioned steepest descent with Armijo backtracking;
    # "cg": Polak-Ribiere+ conjugate directions with a parabolic line search
    method: str = "cg"
    boundary: str = "free"
    max_backtracks: int = 20
    max_step: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not (self.step > 0 and self.tol_energy > 0 and self.tol_residual > 0):
            raise ValueError("step and tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.preconditioner not in ("combined", "kinetic"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.method not in ("sd", "cg"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")


@dataclass
class SolveReport:
    state: State = field(repr=False)
    energy: float
    energy_history: list
    residual_history: list = field(repr=False)
    step_history: list = field(repr=False)
    mass_history: list = field(repr=False)
    mu: float
    masses: tuple[float, float]
    d_values: tuple[float, float, float]
    eps_beta: float
    maxima: tuple[np.ndarray, np.ndarray]
    residual: float
    iterations: int
    converged: bool
    regime: str = "existence"
    message: str = ""
    negative_mass: float = 0.0

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "energy", "residual", "step", "mass1", "mass2"])
            for i, (e, r, s, (m1, m2)) in enumerate(
                zip(self.energy_history, self.residual_history, self.step_history, self.mass_history)
            ):
                w.writerow([i, repr(e), repr(r), repr(s), repr(m1), repr(m2)])


def regime(params: ModelParams, a_star: float) -> str:
    if params.a1 >= a_star or params.a2 >= a_star:
        return "unbounded-below regime"
    if params.beta >= model.beta_star(params.a1, params.a2, a_star):
        return "unbounded-below regime"
    return "existence"


def _shift_for(mu: float) -> float:
    # powers of two keep the number of cached preconditioner symbols small
    return float(2.0 ** round(math.log2(max(1.0, abs(mu)))))


class _Preconditioner:
    def __init__(self, grid: Grid, m: float, V1, V2, config: SolverConfig):
        self.grid, self.m, self.V = grid, m, (V1, V2)
        self.config = config
        self.shift = None
        self.weights = (None, None)

    def update(self, mu: float) -> None:
        shift = _shift_for(mu)
        if shift != self.shift:
            self.shift = shift
            if self.config.preconditioner == "combined":
                self.weights = tuple(np.sqrt(shift / (shift + V)) for V in self.V)

    def __call__(self, f: np.ndarray, i: int) -> np.ndarray:
        if not self.config.precondition:
            return f
        w = self.weights[i]
        if w is None:
            return self.grid.preconditioner(f, self.m, self.shift)
        return w * self.grid.preconditioner(w * f, self.m, self.shift)


def _residual(grid: Grid, s: State, ev: model.Evaluation):
    mu = grid.inner(ev.g1, s.u1) + grid.inner(ev.g2, s.u2)
    r1, r2 = ev.g1 - mu * s.u1, ev.g2 - mu * s.u2
    return mu, math.sqrt(grid.mass(r1) + grid.mass(r2))


def minimize(
    grid: Grid,
    start: State,
    params: ModelParams,
    V1: np.ndarray,
    V2: np.ndarray,
    config: SolverConfig | None = None,
    a_star: float | None = None,
    csv_path=None,
) -> SolveReport:
    """Projected preconditioned descent on the unit-mass manifold.

    The search direction starts from the tangent Sobolev gradient
    ``r = P g - (<u, P g> / <u, P u>) P u`` (summed over both components);
    with ``method="cg"`` it is combined with the previous direction by the
    Polak-Ribiere+ rule.  Each trial point rescales both components jointly
    to unit total mass, and only steps that do not raise the energy are
    accepted.  No absolute values are taken: the discrete kernels are not
    exactly sign-preserving, the minimizer carries negative far-field values
    of relative size ~1e-6, and reflecting them stalls the line search.
    Their mass is reported as ``negative_mass``.

    Iteration stops when the residual ``||g - mu u||`` is below
    ``tol_residual`` and the relative energy change below ``tol_energy``, or
    when the energy stops resolving the remaining residual (reported as
    stagnation; ``converged`` then reflects the residual test alone).
    """
    config = config or SolverConfig()
    boundary = config.boundary
    flag = "existence"
    if a_star is not None:
        flag = regime(params, a_star)
        if flag != "existence":
            warnings.warn(f"no minimizer exists here ({flag})", UnboundedRegimeWarning, stacklevel=2)

    s = start.normalized(grid)
    ev = model.evaluate(grid, s, params, V1, V2, boundary)
    prec = _Preconditioner(grid, params.m, V1, V2, config)
    tau = config.step
    energies, residuals, steps, masses = [], [], [], []
    converged, message = False, ""
    prev_energy = None
    prev_dir = prev_r = prev_gr = None
    stalled = 0
    it = 0
    for it in range(config.max_iter + 1):
        mu, res = _residual(grid, s, ev)
        energies.append(ev.energy)
        residuals.append(res)
        masses.append((grid.mass(s.u1), grid.mass(s.u2)))
        steps.append(tau if it else 0.0)
        if not math.isfinite(ev.energy) or not math.isfinite(res):
            raise FloatingPointError("non-finite energy or residual during minimization")
        if prev_energy is not None:
            change = abs(prev_energy - ev.energy) / max(1.0, abs(ev.energy))
            if res < config.tol_residual and change < config.tol_energy:
                converged = True
                break
        if res < 0.1 * config.tol_residual:
            converged = True
            break
        if prev_energy is not None and prev_energy - ev.energy <= 1e-14 * max(1.0, abs(ev.energy)):
            stalled += 1
        else:
            stalled = 0
        if stalled >= STALL_LIMIT:
            # the energy no longer resolves the remaining residual
            converged = res < config.tol_residual
            message = f"stagnated at residual {res:.3e}"
            break
        if it == config.max_iter:
            message = "max_iter reached"
            break

        prec.update(mu)
        pg = (prec(ev.g1, 0), prec(ev.g2, 1))
        pu = (prec(s.u1, 0), prec(s.u2, 1))
        alpha = (grid.inner(s.u1, pg[0]) + grid.inner(s.u2, pg[1])) / (
            grid.inner(s.u1, pu[0]) + grid.inner(s.u2, pu[1])
        )
        r = (pg[0] - alpha * pu[0], pg[1] - alpha * pu[1])
        gr = grid.inner(ev.g1, r[0]) + grid.inner(ev.g2, r[1])
        d, slope = r, gr
        if config.method == "cg" and prev_dir is not None:
            # Polak-Ribiere+ with the old direction projected onto the new tangent space
            num = gr - grid.inner(ev.g1, prev_r[0]) - grid.inner(ev.g2, prev_r[1])
            b = max(0.0, num / prev_gr)
            c = grid.inner(s.u1, prev_dir[0]) + grid.inner(s.u2, prev_dir[1])
            cand = (r[0] + b * (prev_dir[0] - c * s.u1), r[1] + b * (prev_dir[1] - c * s.u2))
            cslope = grid.inner(ev.g1, cand[0]) + grid.inner(ev.g2, cand[1])
            if cslope > 0:
                d, slope = cand, cslope

        def at(t):
            trial = State(s.u1 - t * d[0], s.u2 - t * d[1]).normalized(grid)
            return trial, model.evaluate(grid, trial, params, V1, V2, boundary)

        if config.method == "cg":
            best = _parabolic_search(at, ev.energy, slope, tau, config.max_backtracks)
        else:
            best = _backtrack(at, ev.energy, slope, tau, config.max_backtracks)
        if best is None and 2.0 * tau * slope <= 1e-12 * max(1.0, abs(ev.energy)):
            converged = res < config.tol_residual
            message = f"stagnated at residual {res:.3e}"
            break
        if best is None:
            report = _report(grid, s, ev, mu, res, energies, residuals, steps, masses, it, False, flag, boundary)
            report.message = "energy increased after max backtracks"
            raise LineSearchError(
                f"line search failed at iteration {it} (residual {res:.3e})", report
            )
        prev_energy = ev.energy
        prev_dir, prev_r, prev_gr = d, r, gr
        step, s, ev = best
        # a vanishing accepted step would freeze the search
        tau = step if step > 1e-12 * config.step else tau
        if config.method != "cg":
            tau = min(2.0 * tau, config.max_step)

    report = _report(grid, s, ev, mu, res, energies, residuals, steps, masses, it, converged, flag, boundary)
    report.message = message
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


def _backtrack(at, e0, slope, tau, max_backtracks):
    """Halve the step until Armijo holds; fall back to the best non-increasing trial."""
    best = None
    for _ in range(max_backtracks):
        trial, ev_t = at(tau)
        if ev_t.energy <= e0 - 1e-4 * tau * slope:
            return tau, trial, ev_t
        if ev_t.energy <= e0 and (best is None or ev_t.energy < best[2].energy):
            best = (tau, trial, ev_t)
        tau *= 0.5
    return best


def _parabolic_search(at, e0, slope, tau, max_backtracks):
    """One trial step plus the vertex of the parabola through E(0), E'(0), E(tau).

    ``E'(0) = -2 slope`` because the gradient is half the derivative.  The
    lower of the two trials is kept if it does not raise the energy;
    otherwise the step is halved.
    """
    for _ in range(max_backtracks):
        if tau * tau == 0.0:
            return None
        trial, ev_t = at(tau)
        cands = [(tau, trial, ev_t)]
        curv = (ev_t.energy - e0 + 2.0 * slope * tau) / (tau * tau)
        if curv > 0 and slope > 0:
            t2 = min(slope / curv, 8.0 * tau)
            # a vertex far below tau carries no resolvable decrease
            if t2 > 1e-8 * tau:
                trial2, ev2 = at(t2)
                cands.append((t2, trial2, ev2))
        best = min(cands, key=lambda c: c[2].energy)
        if best[2].energy <= e0:
            return best
        tau = 0.5 * min(c[0] for c in cands)
    return None


def _report(grid, s, ev, mu, res, energies, residuals, steps, masses, it, converged, flag, boundary):
    kin = grid.half_lap_form(s.u1, boundary) + grid.half_lap_form(s.u2, boundary)
    return SolveReport(
        state=s,
        energy=float(ev.energy),
        energy_history=energies,
        residual_history=residuals,
        step_history=steps,
        mass_history=masses,
        mu=float(mu),
        masses=(grid.mass(s.u1), grid.mass(s.u2)),
        d_values=tuple(float(d) for d in ev.d_values),
        eps_beta=1.0 / kin,
        maxima=find_maxima(grid, s),
        residual=float(res),
        iterations=it,
        converged=converged,
        regime=flag,
        negative_mass=grid.mass(np.minimum(s.u1, 0.0)) + grid.mass(np.minimum(s.u2, 0.0)),
    )


# -- maxima -------------------------------------------------------------------


def refine_peak(grid: Grid, f: np.ndarray, idx) -> np.ndarray:
    """Sub-grid vertex from a 3-point quadratic fit along each axis."""
    n, h = grid.n, grid.spacing
    z = np.empty(3)
    for ax in range(3):
        lo, hi = list(idx), list(idx)
        lo[ax] = (idx[ax] - 1) % n
        hi[ax] = (idx[ax] + 1) % n
        fm, f0, fp = f[tuple(lo)], f[tuple(idx)], f[tuple(hi)]
        curv = fm - 2.0 * f0 + fp
        off = 0.5 * (fm - fp) / curv if curv < 0 else 0.0
        z[ax] = grid.axis[idx[ax]] + np.clip(off, -0.5, 0.5) * h
    return z


def argmax_point(grid: Grid, f: np.ndarray) -> np.ndarray:
    # np.argmax returns the first (lexicographically smallest) index on ties
    idx = np.unravel_index(int(np.argmax(f)), f.shape)
    if any(i <= 1 or i >= grid.n - 2 for i in idx):
        warnings.warn("maximum on the boundary shell; concentration escapes the box", BoundaryLeakWarning, stacklevel=3)
    return refine_peak(grid, f, idx)


def find_maxima(grid: Grid, s: State) -> tuple[np.ndarray, np.ndarray]:
    return argmax_point(grid, s.u1), argmax_point(grid, s.u2)


def near_maximal_points(grid: Grid, f: np.ndarray, rtol: float = 1e-2) -> list[np.ndarray]:
    """All local maxima within ``rtol`` of the global maximum, refined."""
    top = f.max()
    if top <= 0:
        return []
    peaks = (f == maximum_filter(f, size=3, mode="wrap")) & (f >= (1.0 - rtol) * top)
    return [refine_peak(grid, f, tuple(i)) for i in np.argwhere(peaks)]

"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The sweeps behind criteria 5 to 8 run at n = 96 and take tens of minutes on
one core.  Cold-start comparisons are skipped here; they are a diagnostic of
the CLI sweep, not an acceptance claim.
"""

import math
import time

import numpy as np
import pytest

from prhartree import asymptotics, cli, model, solver
from prhartree.model import ModelParams, PotentialSpec, State
from prhartree.scalar_ground import load_or_solve, q_moment, solve_Q
from prhartree.spectral import Grid, translate

from conftest import gaussian

HARMONIC = PotentialSpec.single(exponent=2.0)


def _rel(a, b):
    return abs(a - b) / abs(b)


@pytest.fixture(scope="module")
def ground96(cache_dir):
    return load_or_solve(Grid(96, 30.0), cache_dir)


def _theory(params, pots, ground):
    return model.theory_quantities(params, pots[0], pots[1], ground.a_star, lambda q: q_moment(ground, q))


def _run_sweep(params, pots, ground, config, levels=8):
    th = _theory(params, pots, ground)
    schedule = asymptotics.geometric_schedule(th.beta_star, 0.5 * th.beta_star, levels)
    t0 = time.perf_counter()
    result = asymptotics.sweep(params, pots, schedule, ground, config, th)
    return result, time.perf_counter() - t0


def _symmetric(ground, m=0.0):
    a = 0.5 * ground.a_star
    return ModelParams(a, a, 0.0, m)


@pytest.fixture(scope="module")
def sweep_harmonic(ground128):
    conf = asymptotics.SweepConfig(n=96, box_factor=22.0, cold_start=False)
    return _run_sweep(_symmetric(ground128), (HARMONIC, HARMONIC), ground128, conf)


@pytest.fixture(scope="module")
def sweep_linear_massive(ground128):
    pot = PotentialSpec.single(exponent=1.0, factor=400.0)
    conf = asymptotics.SweepConfig(n=96, box_factor=22.0, cold_start=False)
    return _run_sweep(_symmetric(ground128, 0.5), (pot, pot), ground128, conf)


def test_criterion_1_scalar_ground_state(record_criterion):
    t0 = time.perf_counter()
    g128 = solve_Q(Grid(128, 40.0))
    elapsed = time.perf_counter() - t0
    g96 = solve_Q(Grid(96, 30.0))
    checks = {
        "identity defect": (max(g128.identity_defects) < 1e-3, f"{max(g128.identity_defects):.2e} < 1e-3"),
        "pohozaev": (g128.pohozaev_defect < 5e-3, f"{g128.pohozaev_defect:.2e} < 5e-3"),
        "decay": (-4.5 <= g128.decay_exponent <= -3.5, f"{g128.decay_exponent:.3f} in [-4.5, -3.5]"),
        "a* 96 vs 128": (_rel(g96.a_star, g128.a_star) < 0.01, f"{_rel(g96.a_star, g128.a_star):.2e} < 1e-2"),
        "runtime": (elapsed < 600.0, f"{elapsed:.0f}s < 600s"),
    }
    assert record_criterion(1, checks)


def _faces_max(u):
    return max(np.abs(np.take(u, i, axis=ax)).max() for ax in range(3) for i in (0, -1))


def _random_field(grid, rng, Q):
    """Random test field that is resolved by the grid and contained in the box.

    Length scales are at least four grid spacings and the face values are
    below 1e-4 of the peak; draws violating either are repeated.  Narrower
    fields have too small a spectral kinetic form, and fields that fill the
    box defeat the periodic-image correction.  Both push the discrete
    quotient below the continuum bound.
    """
    w_min = 4.0 * grid.spacing
    a_max = 1.0 / w_min**2
    while True:
        kind = rng.integers(3)
        if kind == 0:
            u = np.zeros(grid.shape)
            for _ in range(rng.integers(1, 4)):
                c = rng.uniform(-3.0, 3.0, 3)
                u += rng.uniform(-1.0, 1.0) * gaussian(grid, rng.uniform(0.05, a_max), c)
        elif kind == 1:
            s, p = rng.uniform(w_min, 3.0), rng.uniform(1.6, 3.0)
            u = (1.0 + (grid.radius / s) ** 2) ** -p
        else:
            bump = gaussian(grid, rng.uniform(0.05, a_max), rng.uniform(-2.0, 2.0, 3))
            u = Q + rng.uniform(-0.3, 0.3) * Q.max() * bump
        if _faces_max(u) <= 1e-4 * np.abs(u).max():
            return u


def test_criterion_2_gn_sharpness(ground96, record_criterion):
    rng = np.random.default_rng(2024)
    g, Q = ground96.grid, ground96.Q
    floor = 0.5 * ground96.a_star
    zero = np.zeros(g.shape)
    scalar = []
    for _ in range(200):
        u = _random_field(g, rng, Q)
        scalar.append(model.gn_quotient(g, State(u, zero), "image") / floor - 1.0)
    pairs = []
    for _ in range(20):
        s = State(_random_field(g, rng, Q), _random_field(g, rng, Q))
        pairs.append(model.gn_quotient(g, s, "image") / floor - 1.0)
    attained = []
    for _ in range(20):
        tau, theta = rng.uniform(0.1, 5.0), rng.uniform(0.0, 2.0 * math.pi)
        q = translate(Q, rng.integers(-5, 6, 3))
        s = State(tau * math.sin(theta) * q, tau * math.cos(theta) * q)
        attained.append(abs(model.gn_quotient(g, s, "image") / floor - 1.0))
    checks = {
        "200 scalar fields": (min(scalar) >= -1e-3, f"min W/(a*/2)-1 = {min(scalar):.2e} >= -1e-3"),
        "20 random pairs": (min(pairs) >= -1e-3, f"min = {min(pairs):.2e} >= -1e-3"),
        "20 Q pairs attain": (max(attained) < 0.01, f"max dev {max(attained):.2e} < 1e-2"),
    }
    assert record_criterion(2, checks)


def test_criterion_3_existence(ground128, record_criterion):
    a_star = ground128.a_star
    grid = Grid(96, 16.0)
    V = model.potential_field(HARMONIC, grid)
    checks = {}
    for m in (0.0, 0.5):
        a = 0.5 * a_star
        p = ModelParams(a, a, 0.5 * model.beta_star(a, a, a_star), m)
        gam = model.gamma(a, a, a_star)
        reps, times = [], []
        for seed in (0, 1):
            start = solver.random_start(grid, 2.0, gam, seed)
            t0 = time.perf_counter()
            reps.append(solver.minimize(grid, start, p, V, V, solver.SolverConfig(seed=seed), a_star=a_star))
            times.append(time.perf_counter() - t0)
        res = max(r.residual for r in reps)
        emin = min(r.energy for r in reps)
        spread = abs(reps[0].energy - reps[1].energy)
        checks[f"m={m} residual"] = (res < 1e-5 and all(r.converged for r in reps), f"{res:.1e} < 1e-5")
        checks[f"m={m} energy"] = (emin >= 0.0, f"{emin:.6f} >= 0")
        checks[f"m={m} seeds"] = (spread <= 1e-4, f"|dE| {spread:.1e} <= 1e-4")
        checks[f"m={m} runtime"] = (max(times) < 300.0, f"{max(times):.0f}s < 300s")
    assert record_criterion(3, checks)


def test_criterion_4_nonexistence_probes(ground128, record_criterion):
    a_star = ground128.a_star
    half = 0.5 * a_star
    cases = {
        "a1=1.1a*": ModelParams(1.1 * a_star, half, 0.5 * a_star, 0.0),
        "a2=1.1a*": ModelParams(half, 1.1 * a_star, 0.5 * a_star, 0.0),
        "beta=1.1beta*": ModelParams(half, half, 1.1 * model.beta_star(half, half, a_star), 0.0),
    }
    checks = {}
    for name, p in cases.items():
        res = solver.probe_nonexistence(p, (HARMONIC, HARMONIC), ground128)
        ok = res.decreasing and res.min_energy < -10.0 and res.verdict == solver.UNBOUNDED_VERDICT
        checks[name] = (ok, f"decreasing={res.decreasing} min E {res.min_energy:.1f} by sigma {res.curve[-1][0]:g}")
    assert record_criterion(4, checks)


def test_criterion_5_energy_limit(sweep_harmonic, record_criterion):
    result, _ = sweep_harmonic
    e = [r.energy for r in result.records]
    ratio = e[-1] / e[0]
    checks = {
        "decreasing": (all(b < a for a, b in zip(e, e[1:])), f"{len(e)} levels"),
        "last/first": (ratio < 0.05, f"{ratio:.4f} < 0.05"),
    }
    assert record_criterion(5, checks)


def test_criterion_6_concentration_limits(sweep_harmonic, record_criterion):
    result, _ = sweep_harmonic
    resolved = [r for r in result.records if r.resolved]
    assert resolved, "no resolvable sweep record"
    last = resolved[-1]
    th = result.theory
    g = th.gamma
    mass_err = max(_rel(last.masses[0], g), _rel(last.masses[1], 1.0 - g))
    prof = max(last.profile_err1, last.profile_err2)
    targets = (2 * g * g / th.a_star, 2 * (1 - g) ** 2 / th.a_star, 2 * g * (1 - g) / th.a_star)
    d_err = max(_rel(d * last.eps_beta, t) for d, t in zip(last.d_values, targets))
    mu_err = abs(last.mu_times_eps + 1.0)
    checks = {
        "masses": (mass_err < 0.02, f"{mass_err:.1e} < 0.02"),
        "profiles L2": (prof < 0.05, f"{prof:.4f} < 0.05"),
        "D ratios": (d_err < 0.10, f"{d_err:.1e} < 0.1"),
        "eps mu": (mu_err < 0.10, f"|eps mu + 1| {mu_err:.4f} < 0.1"),
        "max gap": (last.max_gap < 0.1, f"{last.max_gap:.3f} < 0.1"),
    }
    assert record_criterion(6, checks)


def test_criterion_7_blowup_law(sweep_harmonic, sweep_linear_massive, record_criterion):
    checks = {}
    for name, (result, elapsed) in (("q0=2 m=0", sweep_harmonic), ("q0=1 m=0.5", sweep_linear_massive)):
        try:
            fit = asymptotics.fit_blowup(result.records, result.theory)
            rate = asymptotics.energy_rate(result.records, result.theory)
        except ValueError as exc:
            checks[f"{name} fits"] = (False, str(exc))
            continue
        checks[f"{name} slope"] = (fit.slope_error < 0.10, f"{fit.slope:.4f} vs {fit.target_slope:.4f}")
        amp = fit.amplitude_ratio
        checks[f"{name} eps/pred"] = (0.85 <= amp <= 1.15, f"{amp:.4f} in [0.85, 1.15]")
        er = rate.amplitude_ratio
        checks[f"{name} energy rate"] = (abs(er - 1.0) < 0.15, f"{er:.4f} within 15%")
        checks[f"{name} runtime"] = (elapsed < 3600.0, f"{elapsed:.0f}s < 3600s")
    assert record_criterion(7, checks)


_CRITERION_8: dict = {}


@pytest.mark.parametrize("preset, expected", [("two-center-order", (-1.0, 0.0, 0.0)), ("two-center-flatness", (1.0, 0.0, 0.0))])
def test_criterion_8_flattest_minimum(preset, expected, ground128, record_criterion):
    cfg = cli.PRESETS[preset]
    params = cli.resolve_params(cfg, ground128.a_star)
    pots = cli.potentials_from(cfg)
    conf = asymptotics.SweepConfig(n=cfg["grid"]["n"], box_length=cfg["grid"]["box_length"], cold_start=False)
    levels = cfg["sweep"]["levels"]
    result, _ = _run_sweep(params, pots, ground128, conf, levels)
    th = result.theory
    conc = asymptotics.concentration_check(result.records, th)
    selected = [tuple(c.center) for c in th.Z0]
    # both presets report on one line
    checks = _CRITERION_8
    checks[f"{preset}:Z0"] = (selected == [expected], f"{selected}")
    checks[f"{preset}:maxima"] = (
        conc.verdict == "Z0 selected",
        f"{conc.verdict}, dist {conc.distance:.3f} <= 2h+eps {conc.tolerance:.3f}",
    )
    record_criterion(8, checks)
    assert checks[f"{preset}:Z0"][0] and checks[f"{preset}:maxima"][0]


def test_criterion_9_operator_properties(ground32, record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    grid = Grid(32, 8.0)
    x, y, z = grid.coords
    dia = np.inf
    for m in (0.0, 0.5):
        for boundary in ("periodic", "image", "free"):
            for _ in range(10):
                k = rng.uniform(0.5, 3.0, 3)
                u = gaussian(grid, rng.uniform(0.5, 2.0), rng.uniform(-1, 1, 3)) * np.cos(k[0] * x + k[1] * y + k[2] * z)
                dia = min(dia, grid.kinetic_form(u, m, boundary) - grid.kinetic_form(np.abs(u), m, boundary))

    trans = 0.0
    zero = np.zeros(grid.shape)
    for m in (0.0, 0.5):
        p = ModelParams(1.0, 1.2, 0.7, m)
        for boundary in ("periodic", "image"):
            s = State(gaussian(grid, 2.0), 0.5 * gaussian(grid, 3.0, (0.5, 0.0, 0.0)))
            e0 = model.energy(grid, s, p, zero, zero, boundary)
            shift = rng.integers(-4, 5, 3)
            moved = State(translate(s.u1, shift), translate(s.u2, shift))
            trans = max(trans, _rel(model.energy(grid, moved, p, zero, zero, boundary), e0))

    # w(x) = u(lam x): kin_m(w) = lam^-2 kin_{m/lam}(u), Gaussians sampled exactly
    scale = 0.0
    for m in (0.0, 0.5):
        for lam in (0.5, 2.0):
            a = 1.0
            u = gaussian(grid, a)
            w = gaussian(grid, a * lam * lam)
            lhs = grid.kinetic_form(w, m, "free")
            rhs = grid.kinetic_form(u, m / lam, "free") / lam**2
            scale = max(scale, _rel(lhs, rhs))

    cs = np.inf
    for _ in range(20):
        f = gaussian(grid, rng.uniform(0.5, 2.0), rng.uniform(-1, 1, 3)) * rng.uniform(-1, 1)
        g = gaussian(grid, rng.uniform(0.5, 2.0), rng.uniform(-1, 1, 3)) + 0.3 * gaussian(grid, 1.0, rng.uniform(-1, 1, 3))
        dfg = grid.coulomb_bilinear(f, g)
        cs = min(cs, grid.coulomb_bilinear(f, f) * grid.coulomb_bilinear(g, g) - dfg * dfg)

    gg = ground32.grid
    phi = gg.coulomb_potential(ground32.Q**2, check=False)
    r = gg.radius
    newton = float(np.max(phi[r > 0] * r[r > 0]) / gg.mass(ground32.Q))
    elapsed = time.perf_counter() - t0
    checks = {
        "diamagnetic": (dia >= 0.0, f"min T(u)-T(|u|) {dia:.2e} >= 0"),
        "translation": (trans < 1e-8, f"{trans:.1e} < 1e-8"),
        "scaling": (scale < 0.01, f"{scale:.1e} < 1e-2"),
        "cauchy-schwarz": (cs >= 0.0, f"min D(f,f)D(g,g)-D(f,g)^2 {cs:.2e} >= 0"),
        "newton": (newton <= 1.0, f"max |x| phi/mass {newton:.6f} <= 1"),
        "runtime": (elapsed < 120.0, f"{elapsed:.1f}s < 120s"),
    }
    assert record_criterion(9, checks)

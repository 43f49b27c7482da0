import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from prhartree.spectral import (
    EPSTEIN_Z3_AT_2,
    BoundaryLeakWarning,
    Grid,
    coulomb_symbol,
    dilate,
    image_coefficient,
    load_field,
    sample_affine,
    save_field,
    translate,
)

from conftest import gaussian


def gaussian_kinetic_oracle(a: float, m: float) -> float:
    """int sqrt(k^2+m^2) |F exp(-a r^2)|^2 ds by radial quadrature in k."""
    pref = (np.pi / a) ** 3 / (2 * np.pi) ** 3 * 4 * np.pi
    val, _ = quad(lambda k: k * k * np.sqrt(k * k + m * m) * np.exp(-k * k / (2 * a)), 0, np.inf)
    return pref * val


# -- grid and transforms ----------------------------------------------------------


@pytest.mark.parametrize("n", [15, 17, 14, 22, 0])
def test_grid_rejects_bad_sizes(n):
    with pytest.raises(ValueError):
        Grid(n, 10.0)


def test_grid_rejects_bad_box():
    with pytest.raises(ValueError):
        Grid(32, -1.0)


def test_origin_at_center_index():
    g = Grid(32, 16.0)
    assert g.axis[16] == 0.0
    assert g.axis[0] == -8.0


@settings(max_examples=10, deadline=None)
@given(n=st.sampled_from([16, 20, 24, 32, 48]), seed=st.integers(0, 2**32 - 1))
def test_roundtrip_identity(n, seed):
    g = Grid(n, 7.0)
    f = np.random.default_rng(seed).standard_normal(g.shape)
    assert np.max(np.abs(g.inverse(g.forward(f)) - f)) < 1e-12


def test_unit_symbol_is_identity(rng):
    g = Grid(16, 5.0)
    f = rng.standard_normal(g.shape)
    out = g.apply_multiplier(f, lambda k: np.ones_like(k))
    assert np.max(np.abs(out - f)) < 1e-12


def test_nonfinite_symbol_rejected():
    g = Grid(16, 5.0)
    with pytest.raises(ValueError):
        with np.errstate(divide="ignore"):
            g.apply_multiplier(np.ones(g.shape), lambda k: 1.0 / k)


# -- kinetic forms against a radial quadrature oracle ------------------------------


@pytest.mark.parametrize("m", [0.0, 0.5, 2.0])
def test_kinetic_form_gaussian_image(m):
    g = Grid(64, 32.0)
    a = 0.5
    u = gaussian(g, a)
    exact = gaussian_kinetic_oracle(a, m)
    assert g.kinetic_form(u, m, "image") == pytest.approx(exact, rel=1e-6)
    assert g.kinetic_form(u, m, "free") == pytest.approx(exact, rel=1e-6)


def test_image_residual_is_next_multipole():
    # after the monopole image term the error is the O(L^-6) quadrupole term
    exact = gaussian_kinetic_oracle(0.5, 0.0)
    errs = []
    for n, L in [(32, 16.0), (48, 24.0)]:
        g = Grid(n, L)
        errs.append(abs(g.kinetic_form(gaussian(g, 0.5), 0.0, "image") / exact - 1))
    assert np.log(errs[0] / errs[1]) / np.log(1.5) == pytest.approx(6.0, abs=0.2)


def test_periodic_form_misses_image_term():
    g = Grid(64, 32.0)
    u = gaussian(g, 0.5)
    exact = gaussian_kinetic_oracle(0.5, 0.0)
    total = g.cell_volume * u.sum()
    periodic = g.half_lap_form(u)
    kappa = EPSTEIN_Z3_AT_2 / (np.pi**2 * 32.0**4)
    assert periodic < exact
    assert periodic + kappa * total**2 == pytest.approx(exact, rel=1e-6)


def test_image_coefficient_massless_limit():
    L = 12.0
    assert image_coefficient(1e-6, L) == pytest.approx(image_coefficient(0.0, L), rel=1e-6)


def test_image_coefficient_decreases_with_mass():
    vals = [image_coefficient(m, 10.0) for m in (0.0, 0.1, 0.5, 1.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_free_boundary_penalizes_box_filling_fields():
    g = Grid(16, 8.0)
    const = np.ones(g.shape)
    assert g.half_lap_form(const) == pytest.approx(0.0, abs=1e-10)
    # the zero extension sees the jump at the faces
    free = g.half_lap_form(const, "free")
    assert free > 2.0 * g.half_lap_form(const, "image")
    # a box indicator is not in H^{1/2}: the form grows under refinement
    fine = Grid(32, 8.0)
    assert fine.half_lap_form(np.ones(fine.shape), "free") > free


def test_unknown_boundary():
    g = Grid(16, 8.0)
    with pytest.raises(ValueError):
        g.relativistic(np.ones(g.shape), 0.0, "dirichlet")


def test_free_operator_is_symmetric(rng):
    g = Grid(16, 6.0)
    f, h = rng.standard_normal((2,) + g.shape)
    lhs = g.inner(f, g.relativistic(h, 0.7, "free"))
    rhs = g.inner(h, g.relativistic(f, 0.7, "free"))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_h_half_norm_uses_both_weights():
    g = Grid(32, 16.0)
    u = gaussian(g, 0.5)
    assert g.h_half_norm_sq(u) == pytest.approx(g.half_lap_form(u) + g.mass(u))


# -- Coulomb -------------------------------------------------------------------------


def test_coulomb_symbol_zero_mode():
    R = 3.0
    sym = coulomb_symbol(R)
    assert sym(np.array([0.0]))[0] == pytest.approx(2 * np.pi * R * R)
    k = np.array([1e-5, 2e-4])
    direct = 4 * np.pi * (1 - np.cos(k * R)) / k**2
    assert np.allclose(sym(k), direct, rtol=1e-6)


def test_coulomb_gaussian_potential_at_origin():
    g = Grid(48, 12.0)
    alpha = 3.5
    rho = (alpha / np.pi) ** 1.5 * gaussian(g, alpha)
    phi = g.coulomb_potential(rho)
    c = g.n // 2
    assert phi[c, c, c] == pytest.approx(2 * np.sqrt(alpha / np.pi), rel=5e-3)


def test_coulomb_gaussian_self_energy():
    g = Grid(48, 12.0)
    alpha = 3.5
    rho = (alpha / np.pi) ** 1.5 * gaussian(g, alpha)
    assert g.coulomb_bilinear(rho, rho) == pytest.approx(np.sqrt(2 * alpha / np.pi), rel=5e-3)


def test_coulomb_zero_density():
    g = Grid(16, 8.0)
    assert np.all(g.coulomb_potential(np.zeros(g.shape)) == 0.0)


def test_coulomb_symmetric_and_psd(rng):
    g = Grid(16, 8.0)
    f, h = rng.standard_normal((2,) + g.shape)
    d1, d2 = g.coulomb_bilinear(f, h, check=False), g.coulomb_bilinear(h, f, check=False)
    assert abs(d1 - d2) <= 1e-10 * (abs(d1) + 1)
    assert g.coulomb_bilinear(f, f, check=False) >= -1e-10


def test_boundary_leak_warning():
    g = Grid(16, 8.0)
    with pytest.warns(BoundaryLeakWarning):
        g.coulomb_potential(np.ones(g.shape))


def test_cauchy_schwarz_and_equality(rng):
    g = Grid(24, 10.0)
    u1 = gaussian(g, 0.8) * (1 + 0.3 * rng.random(g.shape))
    u2 = gaussian(g, 0.4, (0.5, 0.0, 0.0))
    f, h = u1**2, u2**2
    dfh = g.coulomb_bilinear(f, h, check=False)
    dff = g.coulomb_bilinear(f, f, check=False)
    dhh = g.coulomb_bilinear(h, h, check=False)
    assert dfh <= np.sqrt(dff * dhh) + 1e-10
    kappa = 2.7
    eq = g.coulomb_bilinear(f, kappa * f, check=False)
    assert eq == pytest.approx(np.sqrt(dff * g.coulomb_bilinear(kappa * f, kappa * f, check=False)), rel=1e-6)


# -- inequalities ------------------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.sampled_from([0.0, 0.5, 3.0]))
def test_diamagnetic(seed, m):
    g = Grid(16, 6.0)
    u = np.random.default_rng(seed).standard_normal(g.shape) * gaussian(g, 0.2)
    t = g.kinetic_form(u, m)
    assert t >= g.kinetic_form(np.abs(u), m) - 1e-9 * (1 + abs(t))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_convexity(seed):
    g = Grid(16, 6.0)
    r = np.random.default_rng(seed)
    u1 = r.random(g.shape) * gaussian(g, 0.2)
    u2 = r.random(g.shape) * gaussian(g, 0.3)
    lhs = g.half_lap_form(np.sqrt(u1**2 + u2**2))
    assert lhs <= g.half_lap_form(u1) + g.half_lap_form(u2) + 1e-10


# -- translation and dilation --------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(shift=st.tuples(*(st.integers(-40, 40),) * 3), m=st.sampled_from([0.0, 1.0]))
def test_translation_invariance(shift, m):
    g = Grid(16, 6.0)
    u = gaussian(g, 0.5) * (1 + 0.2 * np.cos(g.coords[0]))
    assert g.kinetic_form(translate(u, shift), m) == pytest.approx(g.kinetic_form(u, m), rel=1e-12)


def test_translate_shape_check():
    with pytest.raises(ValueError):
        translate(np.zeros((16, 16, 16)), (1, 2))


def test_dilate_identity(rng):
    g = Grid(16, 6.0)
    f = rng.standard_normal(g.shape)
    assert np.max(np.abs(dilate(f, 1.0, g) - f)) < 1e-10
    assert np.max(np.abs(dilate(f, 1.0, g, method="spectral") - f)) < 1e-10


def test_dilate_rejects_nonpositive():
    g = Grid(16, 6.0)
    with pytest.raises(ValueError):
        dilate(np.zeros(g.shape), 0.0, g)


@pytest.mark.parametrize("lam", [0.8, 1.25])
@pytest.mark.parametrize("m", [0.0, 1.0])
def test_scaling_law(lam, m):
    g = Grid(32, 16.0)
    u = gaussian(g, 0.6)
    ud = dilate(u, lam, g, method="spectral")
    # kin_m(lam^{3/2} u(lam x)) = lam kin_{m/lam}(u)
    assert g.kinetic_form(ud, m, "image") == pytest.approx(lam * g.kinetic_form(u, m / lam, "image"), rel=1e-4)


def test_spectral_resample_of_band_limited_field():
    g = Grid(32, 16.0)
    u = gaussian(g, 0.3)
    out = sample_affine(u, g, g, 0.7, center=(0.3, -0.2, 0.1), method="spectral")
    x, y, z = g.coords
    exact = np.exp(-0.3 * ((0.7 * x + 0.3) ** 2 + (0.7 * y - 0.2) ** 2 + (0.7 * z + 0.1) ** 2))
    assert np.max(np.abs(out - exact)) < 1e-8


def test_resample_outside_box_is_zero():
    g = Grid(16, 4.0)
    out = sample_affine(np.ones(g.shape), g, g, 3.0)
    assert out[0, 0, 0] == 0.0
    assert out[8, 8, 8] == 1.0


# -- field dumps -------------------------------------------------------------------


def test_field_roundtrip(tmp_path, rng):
    g = Grid(16, 6.5)
    f = rng.standard_normal(g.shape)
    path = tmp_path / "f.f64"
    save_field(path, f, g, name="test", extra={"note": 1})
    raw = np.fromfile(path, dtype="<f8")
    # x-fastest order
    assert raw[1] == f[1, 0, 0]
    meta = json.loads((tmp_path / "f.f64.json").read_text())
    assert meta["n"] == 16 and meta["box_length"] == 6.5 and meta["name"] == "test"
    f2, g2, meta2 = load_field(path)
    assert g2 == g
    assert np.array_equal(f2, f)
    assert meta2["note"] == 1

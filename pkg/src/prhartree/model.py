"""Coupled two-component energy, its gradient, and closed-form theory constants.

The energy on the unit-mass manifold is

    E(u1, u2) = sum_i <u_i, sqrt(-Lap + m^2) u_i> + <V_i u_i, u_i>
                - (a1 D11 + a2 D22 + 2 beta D12) / 2

with ``Dij = D(u_i^2, u_j^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .spectral import Grid


@dataclass(frozen=True)
class ModelParams:
    a1: float
    a2: float
    beta: float
    m: float = 0.0

    def __post_init__(self):
        for name in ("a1", "a2", "beta", "m"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError("intraspecies strengths must be nonnegative")
        if self.m < 0:
            raise ValueError("mass parameter m must be nonnegative")

    def swapped(self) -> "ModelParams":
        return ModelParams(self.a2, self.a1, self.beta, self.m)


@dataclass(frozen=True)
class PotentialTerm:
    center: tuple[float, float, float]
    exponent: float
    factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 3:
            raise ValueError("potential centers are points in R^3")
        if not self.exponent > 0:
            raise ValueError(f"potential exponent must be positive, got {self.exponent!r}")
        if not self.factor > 0:
            raise ValueError(f"potential factor must be positive, got {self.factor!r}")


@dataclass(frozen=True)
class PotentialSpec:
    """V(x) = c * prod_j |x - x_j|^{q_j} with c the product of the term factors."""

    terms: tuple[PotentialTerm, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("a potential needs at least one term")
        centers = [t.center for t in self.terms]
        for i, a in enumerate(centers):
            for b in centers[:i]:
                if np.allclose(a, b):
                    raise ValueError(f"duplicate potential center {a}")

    @classmethod
    def single(cls, center=(0.0, 0.0, 0.0), exponent: float = 2.0, factor: float = 1.0):
        return cls((PotentialTerm(center, exponent, factor),))

    @classmethod
    def from_dicts(cls, items: Sequence[dict]) -> "PotentialSpec":
        return cls(
            tuple(
                PotentialTerm(tuple(d["center"]), float(d["exponent"]), float(d.get("factor", 1.0)))
                for d in items
            )
        )

    def to_dicts(self) -> list[dict]:
        return [
            {"center": list(t.center), "exponent": t.exponent, "factor": t.factor} for t in self.terms
        ]

    @property
    def factor(self) -> float:
        return float(np.prod([t.factor for t in self.terms]))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at an array of points with trailing dimension 3."""
        points = np.asarray(points, dtype=float)
        out = np.full(points.shape[:-1], self.factor)
        for t in self.terms:
            out = out * np.linalg.norm(points - np.asarray(t.center), axis=-1) ** t.exponent
        return out

    def local_coefficient(self, j: int) -> float:
        """lim V(x)/|x - x_j|^{q_j} as x -> x_j, in closed form."""
        cj = np.asarray(self.terms[j].center)
        out = self.factor
        for k, t in enumerate(self.terms):
            if k != j:
                out *= float(np.linalg.norm(cj - np.asarray(t.center))) ** t.exponent
        return out


def potential_field(spec: PotentialSpec, grid: Grid, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """V sampled at ``origin + x`` for the grid points x."""
    x, y, z = grid.coords
    out = np.full(grid.shape, spec.factor)
    for t in spec.terms:
        cx, cy, cz = np.asarray(t.center) - np.asarray(origin, dtype=float)
        r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2)
        out = out * r**t.exponent
    return out


@dataclass(frozen=True)
class State:
    u1: np.ndarray
    u2: np.ndarray

    def total_mass(self, grid: Grid) -> float:
        return grid.mass(self.u1) + grid.mass(self.u2)

    def normalized(self, grid: Grid) -> "State":
        s = 1.0 / math.sqrt(self.total_mass(grid))
        return State(self.u1 * s, self.u2 * s)

    def swapped(self) -> "State":
        return State(self.u2, self.u1)


# -- energy and first variation ------------------------------------------------


@dataclass
class Evaluation:
    """Energy pieces and the gradient at one state, sharing all transforms."""

    energy: float
    kinetic: tuple[float, float]
    potential: tuple[float, float]
    d_values: tuple[float, float, float]
    g1: np.ndarray = field(repr=False)
    g2: np.ndarray = field(repr=False)

    @property
    def gradient(self) -> tuple[np.ndarray, np.ndarray]:
        return self.g1, self.g2


def _check_shapes(grid: Grid, *fields_):
    for f in fields_:
        if np.shape(f) != grid.shape:
            raise ValueError(f"field of shape {np.shape(f)} does not live on grid {grid.shape}")


def evaluate(
    grid: Grid, s: State, p: ModelParams, V1, V2, boundary: str = "periodic", check: bool = False
) -> Evaluation:
    """All energy pieces and the gradient in one pass.

    ``boundary`` selects the closure of the kinetic operator (see
    ``Grid.relativistic``).
    """
    _check_shapes(grid, s.u1, s.u2, V1, V2)
    u1, u2 = s.u1, s.u2
    ku1 = grid.relativistic(u1, p.m, boundary)
    ku2 = grid.relativistic(u2, p.m, boundary)
    rho1, rho2 = u1 * u1, u2 * u2
    phi1 = grid.coulomb_potential(rho1, check=check)
    phi2 = grid.coulomb_potential(rho2, check=check)
    t1, t2 = grid.inner(u1, ku1), grid.inner(u2, ku2)
    p1, p2 = grid.inner(V1, rho1), grid.inner(V2, rho2)
    d11, d22, d12 = grid.inner(phi1, rho1), grid.inner(phi2, rho2), grid.inner(phi1, rho2)
    energy = t1 + t2 + p1 + p2 - 0.5 * (p.a1 * d11 + p.a2 * d22 + 2.0 * p.beta * d12)
    g1 = ku1 + (V1 - p.a1 * phi1 - p.beta * phi2) * u1
    g2 = ku2 + (V2 - p.a2 * phi2 - p.beta * phi1) * u2
    return Evaluation(energy, (t1, t2), (p1, p2), (d11, d22, d12), g1, g2)


def energy(grid: Grid, s: State, p: ModelParams, V1, V2, boundary: str = "periodic") -> float:
    return evaluate(grid, s, p, V1, V2, boundary).energy


def gradient(
    grid: Grid, s: State, p: ModelParams, V1, V2, boundary: str = "periodic"
) -> tuple[np.ndarray, np.ndarray]:
    """Half the Frechet derivative of the energy, without the multiplier term."""
    return evaluate(grid, s, p, V1, V2, boundary).gradient


def lagrange_multiplier(
    grid: Grid,
    s: State,
    p: ModelParams,
    V1,
    V2,
    boundary: str = "periodic",
    ev: Evaluation | None = None,
) -> float:
    mass = s.total_mass(grid)
    if abs(mass - 1.0) >= 1e-8:
        raise ValueError(f"state is off the unit-mass manifold (total mass {mass!r})")
    ev = ev or evaluate(grid, s, p, V1, V2, boundary)
    return grid.inner(ev.g1, s.u1) + grid.inner(ev.g2, s.u2)


def gn_quotient(grid: Grid, s: State, boundary: str = "periodic") -> float:
    """[sum half_lap(u_i)] * total mass / D(rho, rho) with rho = u1^2 + u2^2."""
    rho = s.u1**2 + s.u2**2
    if not np.any(rho):
        raise ValueError("quotient undefined for the zero state")
    kin = grid.half_lap_form(s.u1, boundary) + grid.half_lap_form(s.u2, boundary)
    num = kin * s.total_mass(grid)
    return num / grid.coulomb_bilinear(rho, rho, check=False)


# -- closed-form constants ----------------------------------------------------


def beta_star(a1: float, a2: float, a_star: float) -> float:
    if not (0 <= a1 <= a_star and 0 <= a2 <= a_star):
        raise ValueError("beta* needs 0 <= a1, a2 <= a*")
    return a_star + math.sqrt((a_star - a1) * (a_star - a2))


def gamma(a1: float, a2: float, a_star: float) -> float:
    if not (0 <= a1 < a_star and 0 <= a2 < a_star):
        raise ValueError("gamma needs 0 <= a1, a2 < a*")
    r1, r2 = math.sqrt(a_star - a1), math.sqrt(a_star - a2)
    return r2 / (r1 + r2)


def _match_centers(spec1: PotentialSpec, spec2: PotentialSpec, atol=1e-12):
    """Index pairs (j1, j2) of centers shared by both potentials."""
    pairs = []
    for j1, t1 in enumerate(spec1.terms):
        for j2, t2 in enumerate(spec2.terms):
            if np.allclose(t1.center, t2.center, atol=atol):
                pairs.append((j1, j2))
    return pairs


@dataclass(frozen=True)
class CenterData:
    center: tuple[float, float, float]
    q1: float
    q2: float
    q: float
    lam: float


def lambda_j(spec1: PotentialSpec, spec2: PotentialSpec, gam: float, moment) -> list[CenterData]:
    """Per shared center: q_j = min(q1j, q2j) and lambda_j by the three-case rule.

    ``moment(q)`` must return the integral of |y|^q Q(y)^2.
    """
    out = []
    for j1, j2 in _match_centers(spec1, spec2):
        q1, q2 = spec1.terms[j1].exponent, spec2.terms[j2].exponent
        c1, c2 = spec1.local_coefficient(j1), spec2.local_coefficient(j2)
        if q1 < q2:
            lam = gam * c1 * moment(q1)
        elif q1 > q2:
            lam = (1.0 - gam) * c2 * moment(q2)
        else:
            lam = (gam * c1 + (1.0 - gam) * c2) * moment(q1)
        out.append(CenterData(spec1.terms[j1].center, q1, q2, min(q1, q2), lam))
    if not out:
        raise ValueError("the two potentials share no common minimum point")
    return out


def q0_and_Z0(centers: Sequence[CenterData], rtol: float = 1e-9):
    """Largest vanishing order q0, then the centers minimizing lambda among them."""
    q0 = max(c.q for c in centers)
    Z = [c for c in centers if math.isclose(c.q, q0, rel_tol=rtol)]
    lam0 = min(c.lam for c in Z)
    Z0 = [c for c in Z if math.isclose(c.lam, lam0, rel_tol=rtol)]
    return q0, lam0, Z, Z0


def epsilon_prediction(beta: float, beta_s: float, gam: float, q0: float, lam0: float) -> float:
    if beta >= beta_s:
        raise ValueError("predicted blow-up scale needs beta < beta*")
    if not (q0 > 0 and lam0 > 0):
        raise ValueError("q0 and lambda0 must be positive")
    return (2.0 * gam * (1.0 - gam) * (beta_s - beta) / (q0 * lam0)) ** (1.0 / (q0 + 1.0))


def energy_rate_constant(a_star: float, gam: float, q0: float, lam0: float) -> float:
    """Limit of e(beta) / (beta* - beta)^{q0/(q0+1)}."""
    if not (q0 > 0 and lam0 > 0):
        raise ValueError("q0 and lambda0 must be positive")
    return (
        (q0 + 1.0)
        / (q0 * a_star)
        * (q0 * lam0) ** (1.0 / (q0 + 1.0))
        * (2.0 * gam * (1.0 - gam)) ** (q0 / (q0 + 1.0))
    )


@dataclass(frozen=True)
class TheoryQuantities:
    a_star: float
    beta_star: float
    gamma: float
    centers: tuple[CenterData, ...]
    q0: float
    lambda0: float
    Z: tuple[CenterData, ...]
    Z0: tuple[CenterData, ...]

    def epsilon(self, beta: float) -> float:
        return epsilon_prediction(beta, self.beta_star, self.gamma, self.q0, self.lambda0)

    def energy_constant(self) -> float:
        return energy_rate_constant(self.a_star, self.gamma, self.q0, self.lambda0)


def theory_quantities(
    params: ModelParams, spec1: PotentialSpec, spec2: PotentialSpec, a_star: float, moment
) -> TheoryQuantities:
    gam = gamma(params.a1, params.a2, a_star)
    centers = lambda_j(spec1, spec2, gam, moment)
    q0, lam0, Z, Z0 = q0_and_Z0(centers)
    return TheoryQuantities(
        a_star=a_star,
        beta_star=beta_star(params.a1, params.a2, a_star),
        gamma=gam,
        centers=tuple(centers),
        q0=q0,
        lambda0=lam0,
        Z=tuple(Z),
        Z0=tuple(Z0),
    )

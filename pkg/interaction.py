"""
Potentials, couplings, decay seminorms, Nemytskii drift operators and the
interaction energy of finite-volume quantum lattice models.

A JSON model document (ModelSpec) is validated with pydantic and compiled into
a numeric Model: site list, pair list, padded neighbor tables and boundary
loops. The numeric kernels (drift_field, action_batch) work on coefficient
arrays of shape (..., n_sites, 2N+1) so samplers and oracles can evaluate
whole batches at once.
"""

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial
from pydantic import BaseModel, Field, PrivateAttr, model_validator
from scipy import special

import config
from errors import ConfigurationError, DivergenceError, DomainError
from loop_core import (
    CircleGrid,
    LoopNormKind,
    OscillatorParams,
    SpectralLoop,
    basis_matrix,
    grid_norm,
    mode_spectrum,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------
# One-site potentials
# ---------------------------------------------------------
class OneSitePotential:
    """V_k with V, V', V'' available pointwise on arrays."""

    growth_order: float = math.inf

    def eval(self, q, order: int = 0):
        raise NotImplementedError

    @property
    def is_even(self) -> bool:
        return False

    @property
    def is_polynomial(self) -> bool:
        return False


@dataclass(frozen=True)
class PolynomialPotential(OneSitePotential):
    """b_1 q + b_2 q^2 + ... + b_deg q^deg (+ constant)."""

    coefficients: Tuple[float, ...] = ()
    constant: float = 0.0

    def __post_init__(self):
        coeffs = tuple(float(b) for b in self.coefficients)
        while coeffs and coeffs[-1] == 0.0:
            coeffs = coeffs[:-1]
        if coeffs and coeffs[-1] < 0:
            raise DomainError(f"leading coefficient must be positive, got {coeffs[-1]}")
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "_poly", Polynomial((self.constant,) + coeffs))

    @property
    def degree(self) -> int:
        return len(self.coefficients)

    @property
    def growth_order(self) -> float:
        return float(self.degree)

    @property
    def is_even(self) -> bool:
        return all(b == 0.0 for b in self.coefficients[0::2])

    @property
    def is_polynomial(self) -> bool:
        return True

    def eval(self, q, order: int = 0):
        poly = self._poly.deriv(order) if order else self._poly
        return poly(np.asarray(q, dtype=float))


@dataclass(frozen=True)
class ExpPairPotential(OneSitePotential):
    """amplitude * (e^{lam q} + e^{-lam q})."""

    lam: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.lam == 0:
            raise DomainError("ExpPair needs lam != 0")
        if self.amplitude <= 0:
            raise DomainError("ExpPair amplitude must be positive")

    @property
    def is_even(self) -> bool:
        return True

    def eval(self, q, order: int = 0):
        q = np.asarray(q, dtype=float)
        sign = -1.0 if order % 2 else 1.0
        return self.amplitude * self.lam**order * (np.exp(self.lam * q) + sign * np.exp(-self.lam * q))


@dataclass(frozen=True)
class SumPotential(OneSitePotential):
    terms: Tuple[OneSitePotential, ...] = ()

    @property
    def growth_order(self) -> float:
        return max((t.growth_order for t in self.terms), default=0.0)

    @property
    def is_even(self) -> bool:
        return all(t.is_even for t in self.terms)

    @property
    def is_polynomial(self) -> bool:
        return all(t.is_polynomial for t in self.terms)

    def eval(self, q, order: int = 0):
        q = np.asarray(q, dtype=float)
        out = np.zeros_like(q)
        for t in self.terms:
            out = out + t.eval(q, order)
        return out


def eval_V(pot: OneSitePotential, q, order: int = 0):
    if order not in (0, 1, 2):
        raise DomainError(f"order must be 0, 1 or 2, got {order}")
    out = pot.eval(q, order)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------
# Assumption fitting for V
# ---------------------------------------------------------
class InequalityFit(BaseModel):
    name: str
    K: Optional[float] = None
    L: Optional[float] = None
    feasible: bool
    witness: Optional[float] = None
    note: str = ""


class AssumptionReport(BaseModel):
    q_range: Tuple[float, float]
    samples: int
    R: float
    growth_order: Optional[float]
    core_radius: float
    sandwich: InequalityFit
    inequalities: Dict[str, InequalityFit]
    growth: InequalityFit

    @property
    def feasible(self) -> bool:
        return self.sandwich.feasible and self.growth.feasible and all(
            f.feasible for f in self.inequalities.values()
        )

    def constant(self, name: str) -> Optional[float]:
        """K_1..K_4 by number, K_0 for the growth condition."""
        fit = self.growth if name in ("0", "v") else self.inequalities[name]
        return fit.K if fit.feasible else None


def _fit_lower_bound(q, g, h, outer, name, tol):
    """Fit g >= K^{-1}(h - L) with K from the outer region and L over the whole range."""
    if np.max(h) <= tol:
        # holds for every K > 0; K = 0 is reported
        return InequalityFit(name=name, K=0.0, L=0.0, feasible=True)
    bad = outer & (g <= 0) & (h > tol)
    if np.any(bad):
        witness = float(q[np.argmax(bad)])
        return InequalityFit(name=name, feasible=False, witness=witness,
                             note="left side non-positive where right side grows")
    mask = outer & (g > 0)
    if not np.any(mask):
        return InequalityFit(name=name, feasible=False, note="sampled range lies inside the core radius")
    K = float(max(0.0, np.max(h[mask] / g[mask])))
    L = float(max(0.0, np.max(h - K * g)))
    return InequalityFit(name=name, K=K, L=L, feasible=True)


def _core_radius(q, g, tol):
    if np.max(np.abs(g)) <= tol:
        return 1.0
    sign = np.sign(g)
    crossings = np.nonzero((sign[:-1] * sign[1:] <= 0))[0]
    zeros = np.abs(q[crossings]) if crossings.size else np.zeros(1)
    return max(1.0, 2.0 * float(np.max(zeros)))


def check_V_assumptions(pot: OneSitePotential, q_range=(-10.0, 10.0), samples: int = 4001,
                        R: float = 2.0) -> AssumptionReport:
    """Numerically fit the growth sandwich and the coercivity inequalities (i)-(v) over q_range.

    A violation is returned as data with a witness point. Feasibility means
    "holds over the sampled range", never a proof.
    """
    if samples < 100:
        raise DomainError(f"need at least 100 samples, got {samples}")
    lo, hi = float(q_range[0]), float(q_range[1])
    if not hi > lo:
        raise DomainError(f"empty range {q_range}")

    q = np.linspace(lo, hi, samples)
    v0, v1, v2 = (np.asarray(pot.eval(q, k), dtype=float) for k in range(3))
    g = v1 * q
    aq = np.abs(q)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(v1))))
    q0 = _core_radius(q, g, tol)
    outer = aq >= q0

    inequalities = {
        "i": _fit_lower_bound(q, g, np.abs(v1) + np.abs(v2), outer, "i", tol),
        "ii": _fit_lower_bound(q, g, np.abs(v2 * q), outer, "ii", tol),
        "iii": _fit_lower_bound(q, g, aq**R, outer, "iii", tol),
        "iv": _fit_lower_bound(q, g, q**2, outer, "iv", tol),
    }

    # (v) |V''| <= K0 (|V'| + |q|^{R-1}) + L0
    denom = np.abs(v1) + aq ** (R - 1.0)
    mask = outer & (denom > 0)
    K0 = float(np.max(np.abs(v2[mask]) / denom[mask])) if np.any(mask) else 0.0
    L0 = float(max(0.0, np.max(np.abs(v2) - K0 * denom)))
    growth = InequalityFit(name="v", K=K0, L=L0, feasible=True)

    P = pot.growth_order
    if math.isfinite(P) and P > 2:
        sandwich = _fit_sandwich(q, (v0, v1, v2), P, outer)
    else:
        sandwich = InequalityFit(name="V0", feasible=False,
                                 note="growth sandwich needs a finite growth order P > 2")

    report = AssumptionReport(
        q_range=(lo, hi), samples=samples, R=R,
        growth_order=P if math.isfinite(P) else None,
        core_radius=q0, sandwich=sandwich, inequalities=inequalities, growth=growth,
    )
    logger.debug("assumption fit", extra={"feasible": report.feasible, "core_radius": q0})
    return report


def _fit_sandwich(q, derivs, P, outer):
    """K_V^{-1}|q|^{P-l} - C_V <= (sgn q)^l V^{(l)}(q) <= K_V (1 + |q|^{P-l}), l = 0, 1, 2."""
    aq = np.abs(q)
    K_V, parts = 1.0, []
    for l, vl in enumerate(derivs):
        f = np.sign(q) ** l * vl
        power = aq ** (P - l)
        if np.any(outer & (f <= 0)):
            witness = float(q[np.argmax(outer & (f <= 0))])
            return InequalityFit(name="V0", feasible=False, witness=witness,
                                 note=f"derivative of order {l} has the wrong sign")
        K_V = max(K_V, float(np.max(f / (1.0 + power))), float(np.max(power[outer] / f[outer])))
        parts.append((f, power))
    C_V = max(0.0, max(float(np.max(power / K_V - f)) for f, power in parts))
    return InequalityFit(name="V0", K=K_V, L=C_V, feasible=True)


# ---------------------------------------------------------
# Couplings and seminorms
# ---------------------------------------------------------
NONE = "none"
HARMONIC_NN = "harmonic_nn"
POLY_PAIR_NN = "poly_pair_nn"
PAIR_MATRIX = "pair_matrix"
POLYNOMIAL = "polynomial"
EXPONENTIAL = "exponential"

HARMONIC_PROFILE = PolynomialPotential((0.0, 1.0))


@dataclass(frozen=True)
class CouplingSpec:
    """Pair coupling W_{k,j}(q, q') = J_{k,j} w(q - q') with an even profile w."""

    kind: str = NONE
    strength: float = 0.0
    profile: PolynomialPotential = HARMONIC_PROFILE
    envelope: str = EXPONENTIAL
    rate: float = 1.0
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in (NONE, HARMONIC_NN, POLY_PAIR_NN, PAIR_MATRIX):
            raise DomainError(f"unknown coupling kind {self.kind!r}")
        if self.strength < 0:
            raise DomainError("coupling strength must be nonnegative")
        if self.kind == HARMONIC_NN:
            object.__setattr__(self, "profile", HARMONIC_PROFILE)
        if self.kind in (HARMONIC_NN, POLY_PAIR_NN):
            object.__setattr__(self, "radius", 1.0)
        if not self.profile.is_even or self.profile.degree < 2:
            raise DomainError("pair profile must be an even polynomial of degree >= 2")
        if self.envelope not in (POLYNOMIAL, EXPONENTIAL):
            raise DomainError(f"unknown envelope {self.envelope!r}")

    @property
    def R(self) -> int:
        return self.profile.degree

    @property
    def is_active(self) -> bool:
        return self.kind != NONE and self.strength > 0

    @property
    def interaction_range(self) -> float:
        return self.radius if self.is_active else 0.0

    def envelope_value(self, dist):
        dist = np.asarray(dist, dtype=float)
        if self.envelope == POLYNOMIAL:
            return (1.0 + dist) ** (-self.rate)
        return np.exp(-self.rate * dist)

    def J(self, offset) -> float:
        dist = float(np.linalg.norm(offset))
        if not self.is_active or dist == 0 or dist > self.radius + 1e-12:
            return 0.0
        if self.kind == PAIR_MATRIX:
            return float(self.strength * self.envelope_value(dist))
        return self.strength if abs(dist - 1.0) < 1e-12 else 0.0


def lattice_offsets(dimension: int, radius: float, half: bool = False) -> List[Tuple[int, ...]]:
    """Integer offsets with 0 < |r| <= radius; half keeps the lexicographically positive ones."""
    span = int(math.floor(radius + 1e-12))
    out = []
    for r in itertools.product(range(-span, span + 1), repeat=dimension):
        if not any(r) or math.sqrt(sum(x * x for x in r)) > radius + 1e-12:
            continue
        if half and next(x for x in r if x != 0) < 0:
            continue
        out.append(r)
    return out


@dataclass(frozen=True)
class SeminormReport:
    value: float
    tilde_row_sum: float
    tail_bound: float
    radius: float
    weight_kind: str
    weight_rate: float


def _shell_count(s, d):
    return (2 * s + 1) ** d - (2 * s - 1) ** d


def _envelope_tail(c: CouplingSpec, rate: float, weight_kind: str, d: int, tol: float) -> float:
    """Bound on sum over |r| > radius of J(r) * weight(r) via l-infinity shells."""
    if c.kind != PAIR_MATRIX or not c.is_active:
        return 0.0
    if weight_kind == POLYNOMIAL and c.envelope == POLYNOMIAL:
        decay = c.rate - rate
        if decay <= d:
            raise DivergenceError(f"polynomial envelope rate {c.rate} too slow for p={rate} in d={d}")
        h = lambda s: (1.0 + s) ** (-decay)
    elif weight_kind == EXPONENTIAL and c.envelope == EXPONENTIAL:
        decay = c.rate - rate
        if decay <= 0:
            raise DivergenceError(f"exponential envelope rate {c.rate} does not beat delta={rate}")
        h = lambda s: np.exp(-decay * s)
    elif weight_kind == POLYNOMIAL:
        h = lambda s: np.exp(-c.rate * s) * (1.0 + math.sqrt(d) * s) ** rate
    else:
        raise DivergenceError("polynomial envelope cannot dominate exponential weights")

    s0 = max(1, math.ceil((c.radius + 1e-12) / math.sqrt(d)))
    S = s0 + 4000
    s = np.arange(s0, S, dtype=float)
    tail = c.strength * float(np.sum(_shell_count(s, d) * h(s)))

    # analytic remainder beyond S with count(s) <= 2d (3s)^{d-1}
    pref = 2.0 * d * 3.0 ** (d - 1) * c.strength
    if weight_kind == POLYNOMIAL and c.envelope == POLYNOMIAL:
        tail += pref * S ** (d - decay) / (decay - d)
    else:
        mu = (c.rate - rate) if c.envelope == weight_kind else 0.5 * c.rate
        tail += pref * special.gammaincc(d, mu * S) * special.gamma(d) / mu**d
    if tail > tol:
        raise DivergenceError(f"coupling tail bound {tail:.3e} beyond radius {c.radius} exceeds tolerance {tol:.1e}")
    return tail


def j_seminorm(c: CouplingSpec, rate: float = 0.0, dimension: int = 1,
               weight_kind: str = POLYNOMIAL, tolerance: float = 1e-3) -> SeminormReport:
    """||J||_p = sup_k sum_j J_kj (1+|k-j|)^p, or the e^{delta|k-j|} variant.

    Translation invariance reduces the sup to one row. The neglected tail beyond
    the truncation radius is bounded and attached to the report.
    """
    if rate < 0:
        raise DomainError("seminorm exponent must be nonnegative")
    total = 0.0
    for r in lattice_offsets(dimension, c.interaction_range):
        dist = math.sqrt(sum(x * x for x in r))
        w = (1.0 + dist) ** rate if weight_kind == POLYNOMIAL else math.exp(rate * dist)
        total += c.J(r) * w
    tail = _envelope_tail(c, rate, weight_kind, dimension, tolerance)
    return SeminormReport(
        value=total, tilde_row_sum=(2.0**c.R) * total, tail_bound=tail,
        radius=c.interaction_range, weight_kind=weight_kind, weight_rate=rate,
    )


def triple_seminorm(c: CouplingSpec, p: float = 0.0, dimension: int = 1) -> float:
    """|||J|||_p = sup_k sum_j J_kj [1 + (1+|k-j|)^p] for pair couplings."""
    return j_seminorm(c, 0.0, dimension).value + j_seminorm(c, p, dimension).value


def k3_threshold(c: CouplingSpec, dimension: int = 1) -> float:
    norm0 = j_seminorm(c, 0.0, dimension).value
    if norm0 == 0:
        return math.inf
    return 1.0 / (2.0 ** (c.R - 2) * c.R * norm0)


def k3_threshold_moment(c: CouplingSpec, dimension: int = 1) -> float:
    """The smallness threshold used for the uniform moment bounds, (3 R 2^R ||J||_0)^{-1}."""
    norm0 = j_seminorm(c, 0.0, dimension).value
    if norm0 == 0:
        return math.inf
    return 1.0 / (3.0 * c.R * 2.0**c.R * norm0)


@dataclass(frozen=True)
class ManyBodyReport:
    order: int
    norm: Dict[float, float]
    triple_norm: Dict[float, float]
    equivalence_holds: bool


def many_body_family_check(R: float = 2.0, sigma: float = 1.0, dimension: int = 1, radius: int = 6,
                           p_values: Sequence[float] = (0.0, 1.0, 2.0)) -> ManyBodyReport:
    """Three-body distance-exponential family: check |||J|||_0 = 3||J||_0 and
    (1/3)|||J|||_p <= ||J||_p <= 3^{p-1}|||J|||_p for p >= 1 on a finite window."""
    M = 3
    n = np.arange(1, 2000)
    C_M = M ** (R + sigma + 2) * R * float(np.sum((2 * n + 1.0) ** (dimension * M) * np.exp(-sigma * n)))

    sites = [r for r in itertools.product(range(-radius, radius + 1), repeat=dimension) if any(r)]
    dist = lambda a, b: math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    origin = (0,) * dimension

    norm = {p: 0.0 for p in p_values}
    triple = {p: 0.0 for p in p_values}
    for k2, k3 in itertools.combinations(sites, 2):
        pair_sum = dist(origin, k2) + dist(origin, k3) + dist(k2, k3)
        J = M**2 * R * math.exp(-2.0 * sigma * pair_sum) / C_M
        for p in p_values:
            norm[p] += J * (1.0 + dist(origin, k2) + dist(origin, k3)) ** p
            triple[p] += J * (1.0 + (1.0 + dist(origin, k2)) ** p + (1.0 + dist(origin, k3)) ** p)

    ok = True
    for p in p_values:
        if p == 0:
            ok &= math.isclose(triple[p], M * norm[p], rel_tol=1e-12)
        elif p >= 1:
            ok &= triple[p] / M <= norm[p] * (1 + 1e-12) and norm[p] <= M ** (p - 1) * triple[p] * (1 + 1e-12)
    return ManyBodyReport(order=M, norm=norm, triple_norm=triple, equivalence_holds=bool(ok))


# ---------------------------------------------------------
# Weights and lattice norms
# ---------------------------------------------------------
@dataclass(frozen=True)
class WeightSystem:
    kind: str = POLYNOMIAL
    rate: float = 1.0

    def weight(self, site) -> float:
        dist = float(np.linalg.norm(np.asarray(site, dtype=float)))
        if self.kind == POLYNOMIAL:
            return (1.0 + dist) ** self.rate
        return math.exp(self.rate * dist)

    def submultiplicativity(self, dimension: int = 1, window: int = 6) -> float:
        """max gamma_{k-j} / (gamma_k gamma_j) over a window; <= 1 for exponential, <= 2^p for polynomial."""
        sites = list(itertools.product(range(-window, window + 1), repeat=dimension))
        ratio = 0.0
        for k in sites:
            for j in sites:
                diff = tuple(a - b for a, b in zip(k, j))
                ratio = max(ratio, self.weight(diff) / (self.weight(k) * self.weight(j)))
        return ratio

    def lattice_norm(self, values: np.ndarray, sites: Sequence[Tuple[int, ...]],
                     grid: CircleGrid, r: float = 2.0) -> np.ndarray:
        """[sum_k gamma_k^{-1} |omega_k|_{L^r}^2]^{1/2} for grid values (..., n_sites, M)."""
        if len(sites) == 0:
            return np.zeros(np.shape(values)[:-2])
        norms = grid_norm(values, grid, LoopNormKind.lr(r))
        inv = np.array([1.0 / self.weight(s) for s in sites])
        return np.sqrt(np.sum(inv * norms**2, axis=-1))


# ---------------------------------------------------------
# Geometry and states
# ---------------------------------------------------------
ZERO = "zero"
PERIODIC = "periodic"
FROZEN = "frozen"


@dataclass(frozen=True)
class LatticeGeometry:
    dimension: int
    box: Tuple[Tuple[int, int], ...]
    boundary_mode: str = ZERO

    def __post_init__(self):
        box = tuple((int(lo), int(hi)) for lo, hi in self.box)
        if len(box) != self.dimension:
            raise DomainError(f"box has {len(box)} sides for dimension {self.dimension}")
        if any(hi < lo for lo, hi in box):
            raise DomainError(f"empty box {box}")
        if self.boundary_mode not in (ZERO, PERIODIC, FROZEN):
            raise DomainError(f"unknown boundary mode {self.boundary_mode!r}")
        object.__setattr__(self, "box", box)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self.box)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def sites(self) -> List[Tuple[int, ...]]:
        return list(itertools.product(*(range(lo, hi + 1) for lo, hi in self.box)))

    def contains(self, site) -> bool:
        return len(site) == self.dimension and all(lo <= x <= hi for x, (lo, hi) in zip(site, self.box))

    def wrap(self, site) -> Tuple[int, ...]:
        return tuple(lo + (x - lo) % (hi - lo + 1) for x, (lo, hi) in zip(site, self.box))

    def sub_box(self, box) -> "LatticeGeometry":
        return LatticeGeometry(self.dimension, tuple(box), self.boundary_mode)


def site_key(site) -> str:
    return ",".join(str(x) for x in site)


def parse_site(key: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in str(key).split(","))


@dataclass(frozen=True, eq=False)
class LatticeState:
    """Finite-volume configuration: loops on Lambda plus the boundary loops in range."""

    geometry: LatticeGeometry
    params: OscillatorParams
    coeffs: np.ndarray
    boundary_sites: Tuple[Tuple[int, ...], ...] = ()
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 2 or c.shape[0] != self.geometry.size or c.shape[1] % 2 != 1:
            raise DomainError(f"coefficient array of shape {c.shape} does not fit {self.geometry.size} sites")
        b = np.array(self.boundary, dtype=float).reshape(len(self.boundary_sites), c.shape[1])
        c.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "boundary", b)

    @property
    def n_modes(self) -> int:
        return (self.coeffs.shape[1] - 1) // 2

    def site_index(self, site) -> int:
        site = tuple(site)
        if not self.geometry.contains(site):
            raise DomainError(f"site {site} is outside the volume {self.geometry.box}")
        return self.geometry.sites().index(site)

    def loop(self, site) -> SpectralLoop:
        site = tuple(site)
        if self.geometry.contains(site):
            return SpectralLoop(self.coeffs[self.site_index(site)], self.params)
        if site in self.boundary_sites:
            return SpectralLoop(self.boundary[self.boundary_sites.index(site)], self.params)
        return SpectralLoop.zeros(self.params, self.n_modes)

    @property
    def loops(self) -> Dict[Tuple[int, ...], SpectralLoop]:
        return {s: SpectralLoop(c, self.params) for s, c in zip(self.geometry.sites(), self.coeffs)}

    def with_coeffs(self, coeffs: np.ndarray) -> "LatticeState":
        return LatticeState(self.geometry, self.params, coeffs, self.boundary_sites, self.boundary)


# ---------------------------------------------------------
# Model documents
# ---------------------------------------------------------
class OscillatorBlock(BaseModel):
    m: float = Field(1.0, gt=0, description="reduced mass")
    a: float = Field(1.0, gt=0, description="rigidity")
    beta: float = Field(1.0, gt=0, description="inverse temperature")


class ExpPairBlock(BaseModel):
    lam: float
    amplitude: float = Field(1.0, gt=0)


class PotentialBlock(BaseModel):
    polynomial: List[float] = Field(default_factory=list, description="b_1..b_2n")
    constant: float = 0.0
    exp_pairs: List[ExpPairBlock] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shape(self):
        coeffs = list(self.polynomial)
        while coeffs and coeffs[-1] == 0:
            coeffs.pop()
        if coeffs and (len(coeffs) % 2 or coeffs[-1] <= 0):
            raise ValueError("polynomial potential needs even degree and a positive leading coefficient")
        if any(e.lam == 0 for e in self.exp_pairs):
            raise ValueError("exp_pairs need lam != 0")
        return self

    def build(self) -> OneSitePotential:
        poly = PolynomialPotential(tuple(self.polynomial), self.constant)
        if not self.exp_pairs:
            return poly
        terms = (poly,) + tuple(ExpPairPotential(e.lam, e.amplitude) for e in self.exp_pairs)
        return SumPotential(terms)


class CouplingBlock(BaseModel):
    kind: Literal["none", "harmonic_nn", "poly_pair_nn", "pair_matrix"] = "none"
    strength: float = Field(0.0, ge=0)
    profile: List[float] = Field(default_factory=lambda: [0.0, 1.0], description="w_1..w_2r of w(x)")
    envelope: Literal["polynomial", "exponential"] = "exponential"
    rate: float = Field(1.0, gt=0)
    radius: float = Field(1.0, ge=1)

    def build(self) -> CouplingSpec:
        try:
            return CouplingSpec(self.kind, self.strength, PolynomialPotential(tuple(self.profile)),
                                self.envelope, self.rate, self.radius)
        except DomainError as e:
            raise ValueError(str(e)) from e


class BoundaryBlock(BaseModel):
    mode: Literal["zero", "periodic", "frozen"] = "zero"
    file: Optional[str] = None
    constant: Optional[float] = None


class LatticeBlock(BaseModel):
    d: int = Field(1, ge=1, le=3)
    box: List[Tuple[int, int]] = Field(default_factory=lambda: [(0, 0)])
    boundary: BoundaryBlock = Field(default_factory=BoundaryBlock)

    @model_validator(mode="after")
    def _check_box(self):
        if len(self.box) != self.d:
            raise ValueError(f"box has {len(self.box)} sides but d={self.d}")
        if any(hi < lo for lo, hi in self.box):
            raise ValueError(f"empty box {self.box}")
        return self


class DiscretizationBlock(BaseModel):
    n_modes: int = Field(config.DEFAULT_N_MODES, ge=0)
    grid: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_grid(self):
        if self.grid is not None and self.grid < 2 * self.n_modes + 2:
            raise ValueError(f"grid of {self.grid} points cannot resolve {self.n_modes} modes (need >= 2N+2)")
        return self


class VerificationBlock(BaseModel):
    volume_ladder: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    dlr_subvolume: Optional[List[Tuple[int, int]]] = None
    assumption_range: Tuple[float, float] = (-10.0, 10.0)
    quadrature_orders: Optional[List[int]] = None
    holder_rho: Tuple[float, float] = (0.006, 0.19)
    moment_Q: List[float] = Field(default_factory=lambda: [2.0])
    moment_alpha: List[float] = Field(default_factory=lambda: [0.25])
    flow_theta: float = 0.1


class ModelSpec(BaseModel):
    name: str = "model"
    preset: Optional[Literal["model1", "model2", "model3", "gaussian", "harmonic"]] = None
    oscillator: OscillatorBlock = Field(default_factory=OscillatorBlock)
    potential: PotentialBlock = Field(default_factory=PotentialBlock)
    site_potentials: Dict[str, PotentialBlock] = Field(default_factory=dict)
    coupling: CouplingBlock = Field(default_factory=CouplingBlock)
    lattice: LatticeBlock = Field(default_factory=LatticeBlock)
    discretization: DiscretizationBlock = Field(default_factory=DiscretizationBlock)
    verification: VerificationBlock = Field(default_factory=VerificationBlock)

    _base_dir: Optional[Path] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_consistency(self):
        coupling = self.coupling.build()
        if coupling.kind == POLY_PAIR_NN and coupling.R >= self.potential.build().growth_order:
            raise ValueError(f"poly_pair_nn needs pair degree R={coupling.R} below the potential order P")
        for key in self.site_potentials:
            try:
                site = parse_site(key)
            except ValueError:
                raise ValueError(f"site_potentials key {key!r} is not a site") from None
            if len(site) != self.lattice.d:
                raise ValueError(f"site_potentials key {key!r} has wrong dimension")
        return self

    @classmethod
    def from_file(cls, path) -> "ModelSpec":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        spec = cls.model_validate(data)
        spec._base_dir = path.resolve().parent
        return spec

    @classmethod
    def load(cls, name_or_path) -> "ModelSpec":
        """A path to a JSON document or the name of a shipped preset."""
        path = Path(name_or_path)
        if path.suffix != ".json":
            path = config.PRESET_DIR / f"{name_or_path}.json"
        if not path.exists():
            raise ConfigurationError(f"model config not found: {name_or_path}")
        return cls.from_file(path)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def compile(self) -> "Model":
        return Model(self, getattr(self, "_base_dir", None))


# ---------------------------------------------------------
# Compiled model
# ---------------------------------------------------------
class Model:
    """Numeric form of a ModelSpec: grid, spectrum, sites, pairs and boundary loops."""

    def __init__(self, spec: ModelSpec, base_dir: Optional[Path] = None):
        self.spec = spec
        osc = spec.oscillator
        self.params = OscillatorParams(osc.m, osc.a, osc.beta)
        self.n_modes = spec.discretization.n_modes
        self.n_coeffs = 2 * self.n_modes + 1
        n_points = spec.discretization.grid or CircleGrid.for_modes(self.params, self.n_modes).n_points
        self.grid = CircleGrid(n_points, self.params.beta)
        self.weight = self.grid.spacing
        self.lam = mode_spectrum(self.params, self.n_modes)
        self.phi = basis_matrix(self.params, self.n_modes, n_points)

        lat = spec.lattice
        self.geometry = LatticeGeometry(lat.d, tuple(lat.box), lat.boundary.mode)
        self.sites = self.geometry.sites()
        self.n_sites = len(self.sites)
        self.site_index = {s: i for i, s in enumerate(self.sites)}

        self.coupling = spec.coupling.build()
        self._build_potentials()
        self._build_pairs()
        self.boundary_coeffs = self._boundary_loops(base_dir)
        self._build_neighbors()

        digest = hashlib.sha256(spec.canonical_json().encode("utf-8"))
        digest.update(np.ascontiguousarray(self.boundary_coeffs).tobytes())
        self.hash = digest.hexdigest()[:16]

    # -- construction --------------------------------------------------
    def _build_potentials(self):
        base = self.spec.potential.build()
        overrides = {parse_site(k): v.build() for k, v in self.spec.site_potentials.items()}
        self.potentials = [overrides.get(s, base) for s in self.sites]
        groups: Dict[int, Tuple[OneSitePotential, List[int]]] = {}
        for i, pot in enumerate(self.potentials):
            groups.setdefault(id(pot), (pot, []))[1].append(i)
        self.potential_groups = [(pot, np.array(idx)) for pot, idx in groups.values()]

    def _build_pairs(self):
        geo, c = self.geometry, self.coupling
        pairs, outside = [], []
        if c.is_active:
            if geo.boundary_mode == PERIODIC:
                for k in self.sites:
                    for r in lattice_offsets(geo.dimension, c.radius, half=True):
                        j = geo.wrap(tuple(x + y for x, y in zip(k, r)))
                        if j != k:
                            pairs.append((k, j, c.J(r)))
            else:
                for k in self.sites:
                    for r in lattice_offsets(geo.dimension, c.radius):
                        j = tuple(x + y for x, y in zip(k, r))
                        if geo.contains(j):
                            if self.site_index[j] > self.site_index[k]:
                                pairs.append((k, j, c.J(r)))
                        else:
                            pairs.append((k, j, c.J(r)))
                            outside.append(j)
        self.boundary_sites = tuple(sorted(set(outside)))
        b_index = {s: self.n_sites + i for i, s in enumerate(self.boundary_sites)}
        ext = lambda s: self.site_index.get(s, b_index.get(s))
        self.pair_i = np.array([self.site_index[k] for k, _, _ in pairs], dtype=int)
        self.pair_j = np.array([ext(j) for _, j, _ in pairs], dtype=int)
        self.pair_J = np.array([J for _, _, J in pairs], dtype=float)
        self.pad_index = self.n_sites + len(self.boundary_sites)

    def _boundary_loops(self, base_dir) -> np.ndarray:
        n_b = len(self.boundary_sites)
        out = np.zeros((n_b, self.n_coeffs))
        block = self.spec.lattice.boundary
        if n_b == 0 or self.geometry.boundary_mode != FROZEN:
            return out
        span = f"{site_key(self.boundary_sites[0])}..{site_key(self.boundary_sites[-1])}"
        if block.constant is not None:
            out[:, self.n_modes] = block.constant * math.sqrt(self.params.beta)
            return out
        if block.file is None:
            raise ConfigurationError(
                f"frozen boundary needs loops for {n_b} sites {span}: set lattice.boundary.file or .constant"
            )
        path = Path(block.file)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigurationError(f"frozen boundary file {path} not found (needs sites {span})")
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        loops = {parse_site(k): v for k, v in data.get("loops", data).items()}
        missing = [s for s in self.boundary_sites if s not in loops]
        if missing:
            raise ConfigurationError(
                f"frozen boundary file {path} lacks loops for sites "
                f"{site_key(missing[0])}..{site_key(missing[-1])} (range {span})"
            )
        for i, s in enumerate(self.boundary_sites):
            value = loops[s]
            if np.ndim(value) == 0:
                out[i, self.n_modes] = float(value) * math.sqrt(self.params.beta)
            else:
                arr = np.asarray(value, dtype=float)
                if arr.size != self.n_coeffs:
                    raise ConfigurationError(f"boundary loop at {site_key(s)} has {arr.size} coefficients, expected {self.n_coeffs}")
                out[i] = arr
        return out

    def _build_neighbors(self):
        slots: List[List[Tuple[int, float]]] = [[] for _ in range(self.n_sites)]
        for i, j, J in zip(self.pair_i, self.pair_j, self.pair_J):
            slots[i].append((j, J))
            if j < self.n_sites:
                slots[j].append((i, J))
        deg = max((len(s) for s in slots), default=0)
        self.nbr_idx = np.full((self.n_sites, deg), self.pad_index, dtype=int)
        self.nbr_J = np.zeros((self.n_sites, deg))
        for i, s in enumerate(slots):
            for slot, (j, J) in enumerate(s):
                self.nbr_idx[i, slot] = j
                self.nbr_J[i, slot] = J

    # -- states --------------------------------------------------------
    def state(self, coeffs: Optional[np.ndarray] = None) -> LatticeState:
        if coeffs is None:
            coeffs = np.zeros((self.n_sites, self.n_coeffs))
        return LatticeState(self.geometry, self.params, coeffs, self.boundary_sites, self.boundary_coeffs)

    def check_state(self, state: LatticeState):
        if state.coeffs.shape != (self.n_sites, self.n_coeffs):
            raise ConfigurationError(
                f"state of shape {state.coeffs.shape} does not match model ({self.n_sites}, {self.n_coeffs})"
            )
        if state.boundary.shape[0] != len(self.boundary_sites):
            raise ConfigurationError(f"state lacks boundary loops for {len(self.boundary_sites)} sites in range")

    def values(self, coeffs: np.ndarray) -> np.ndarray:
        return np.asarray(coeffs, dtype=float) @ self.phi.T

    def extended_values(self, values: np.ndarray) -> np.ndarray:
        """Site values (..., n_sites, M) followed by boundary values and one zero row."""
        lead = values.shape[:-2]
        bvals = np.broadcast_to(self.boundary_coeffs @ self.phi.T, lead + (len(self.boundary_sites), self.grid.n_points))
        pad = np.zeros(lead + (1, self.grid.n_points))
        return np.concatenate([values, bvals, pad], axis=-2)

    def with_box(self, box, boundary_mode: Optional[str] = None) -> "Model":
        data = self.spec.model_dump()
        data["lattice"]["box"] = [tuple(b) for b in box]
        if boundary_mode is not None:
            data["lattice"]["boundary"]["mode"] = boundary_mode
        spec = ModelSpec.model_validate(data)
        spec._base_dir = getattr(self.spec, "_base_dir", None)
        return spec.compile()

    def with_modes(self, n_modes: int) -> "Model":
        data = self.spec.model_dump()
        data["discretization"] = {"n_modes": n_modes, "grid": None}
        spec = ModelSpec.model_validate(data)
        spec._base_dir = getattr(self.spec, "_base_dir", None)
        return spec.compile()


# ---------------------------------------------------------
# Vectorized kernels
# ---------------------------------------------------------
def _potential_sum(model: Model, values: np.ndarray, order: int) -> np.ndarray:
    """V_k^{(order)} applied site by site to values (..., n_sites, M)."""
    if len(model.potential_groups) == 1:
        return model.potential_groups[0][0].eval(values, order)
    out = np.empty_like(values)
    for pot, idx in model.potential_groups:
        out[..., idx, :] = pot.eval(values[..., idx, :], order)
    return out


def drift_field(model: Model, coeffs: np.ndarray) -> np.ndarray:
    """F_k(omega)(tau_j) = V_k'(omega_k) + sum_l J_kl w'(omega_k - omega_l) for all sites."""
    return drift_from_values(model, model.values(coeffs))


def drift_from_values(model: Model, values: np.ndarray) -> np.ndarray:
    F = _potential_sum(model, values, 1)
    if model.nbr_idx.shape[1]:
        ext = model.extended_values(values)
        diff = values[..., :, None, :] - ext[..., model.nbr_idx, :]
        F = F + np.sum(model.nbr_J[:, :, None] * model.coupling.profile.eval(diff, 1), axis=-2)
    return F


def action_batch(model: Model, coeffs: np.ndarray) -> np.ndarray:
    """Interaction energy plus sum_k int V_k(omega_k), rectangle rule, for (..., n_sites, 2N+1)."""
    return action_from_values(model, model.values(coeffs))


def action_from_values(model: Model, values: np.ndarray) -> np.ndarray:
    total = np.sum(_potential_sum(model, values, 0), axis=(-2, -1))
    if model.pair_i.size:
        ext = model.extended_values(values)
        diff = ext[..., model.pair_i, :] - ext[..., model.pair_j, :]
        total = total + np.sum(model.pair_J[:, None] * model.coupling.profile.eval(diff, 0), axis=(-2, -1))
    return model.weight * total


def _site_or_raise(model: Model, k) -> int:
    k = tuple(k) if not isinstance(k, (int, np.integer)) else (int(k),)
    if k not in model.site_index:
        raise DomainError(f"site {k} is outside the volume {model.geometry.box}")
    return model.site_index[k]


def nemytskii_F(model: Model, state: LatticeState, k) -> np.ndarray:
    """F_k^{V,W}(omega) on the model grid."""
    i = _site_or_raise(model, k)
    model.check_state(state)
    return drift_field(model, state.coeffs)[i]


def action(model: Model, state: LatticeState) -> float:
    model.check_state(state)
    return float(action_batch(model, state.coeffs))


def coercivity_L(model: Model, state: LatticeState, k, include_coupling: bool = False) -> float:
    """(F_k, omega_k)_{L^2}: the diagonal V' part by default, the full drift with include_coupling."""
    i = _site_or_raise(model, k)
    model.check_state(state)
    values = model.values(state.coeffs)
    if include_coupling:
        F = drift_field(model, state.coeffs)[i]
    else:
        F = model.potentials[i].eval(values[i], 1)
    return float(model.weight * np.sum(F * values[i]))

"""
Exact references for desk-scale models.

- tensor-product Gauss-Hermite quadrature of the truncated Gibbs density (<= 2 sites, N <= 2)
- exact diagonalization of the one-site Schroedinger operator in the oscillator basis
- closed-form covariances of the periodic harmonic lattice
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from pydantic import BaseModel, Field
from scipy.linalg import eigh
from scipy.special import factorial2

import config
from errors import BasisSizeError, CapacityError, DomainError
from gibbs import Direction, direction_array, log_density_batch, logderiv_along
from interaction import HARMONIC_NN, PERIODIC, Model, OneSitePotential, PolynomialPotential, site_key
from loop_core import GREEN_SERIES, OscillatorParams, eigenfunction, green, mode_indices

logger = logging.getLogger(__name__)

MAX_QUADRATURE_SITES = 2
MAX_QUADRATURE_MODES = 2


# ---------------------------------------------------------
# Quadrature of the truncated density
# ---------------------------------------------------------
class QuadratureSpec(BaseModel):
    """Gauss-Hermite order per coefficient n = -N..N, shared by all sites."""

    orders: List[int] = Field(..., min_length=1)
    max_points: int = Field(config.QUADRATURE_MAX_POINTS, ge=1)
    chunk: int = Field(1 << 15, ge=1)

    @classmethod
    def for_model(cls, model: Model, zero_order: int = config.QUADRATURE_MIN_ORDER, max_order: int = 40):
        """Zero mode at zero_order; the remaining modes share the largest order that fits the budget."""
        _check_size(model)
        others = model.n_sites * (model.n_coeffs - 1)
        budget = config.QUADRATURE_MAX_POINTS / float(zero_order) ** model.n_sites
        order = max_order if others == 0 else min(max_order, int(math.floor(budget ** (1.0 / others) + 1e-9)))
        if order < 1:
            raise CapacityError(f"no quadrature rule fits {config.QUADRATURE_MAX_POINTS} points for this model")
        orders = [order] * model.n_coeffs
        orders[model.n_modes] = zero_order
        return cls(orders=orders)

    def n_points(self, n_sites: int) -> int:
        return int(np.prod(np.asarray(self.orders, dtype=float) ** n_sites))

    def check(self, model: Model):
        _check_size(model)
        if len(self.orders) != model.n_coeffs:
            raise DomainError(f"need {model.n_coeffs} quadrature orders, got {len(self.orders)}")
        if self.orders[model.n_modes] < config.QUADRATURE_MIN_ORDER:
            raise DomainError(f"zero-mode rule order must be >= {config.QUADRATURE_MIN_ORDER}")
        if any(o < 1 for o in self.orders):
            raise DomainError("quadrature orders must be positive")
        total = self.n_points(model.n_sites)
        if total > self.max_points:
            raise CapacityError(f"quadrature grid of {total} points exceeds {self.max_points}")


def _check_size(model: Model):
    if model.n_sites > MAX_QUADRATURE_SITES or model.n_modes > MAX_QUADRATURE_MODES:
        raise CapacityError(
            f"quadrature handles <= {MAX_QUADRATURE_SITES} sites and N <= {MAX_QUADRATURE_MODES}, "
            f"got {model.n_sites} sites and N={model.n_modes}"
        )


@lru_cache(maxsize=64)
def _rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and log weights for integrals against dx (the Gaussian weight divided out)."""
    x, w = hermegauss(order)
    return x, np.log(w) + 0.5 * x**2


def _integrate(model: Model, spec: QuadratureSpec, functions: Sequence[Callable[[np.ndarray], np.ndarray]],
               center: np.ndarray, scale: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """log of the integral of exp(log_density), and the normalized expectations of each function.

    Each function maps a batch of coefficients (b, n_sites, 2N+1) to (b,) or (b, k).
    Coordinates are c = center + scale * x on the tensor grid.
    """
    orders = np.tile(spec.orders, model.n_sites)
    shape = tuple(int(o) for o in orders)
    rules = [_rule(o) for o in shape]
    total = int(np.prod(shape))
    center = center.reshape(-1)
    scale = scale.reshape(-1)

    shift = -math.inf
    acc_w = 0.0
    acc_f: List[Optional[np.ndarray]] = [None] * len(functions)
    for start in range(0, total, spec.chunk):
        idx = np.unravel_index(np.arange(start, min(total, start + spec.chunk)), shape)
        x = np.stack([rules[d][0][i] for d, i in enumerate(idx)], axis=-1)
        lw = np.sum([rules[d][1][i] for d, i in enumerate(idx)], axis=0)
        c = (center + scale * x).reshape(-1, model.n_sites, model.n_coeffs)
        lw = lw + log_density_batch(model, c)

        top = float(np.max(lw))
        if top > shift:
            factor = math.exp(shift - top) if math.isfinite(shift) else 0.0
            acc_w *= factor
            acc_f = [a * factor if a is not None else None for a in acc_f]
            shift = top
        w = np.exp(lw - shift)
        acc_w += float(np.sum(w))
        for k, fn in enumerate(functions):
            vals = np.asarray(fn(c), dtype=float).reshape(c.shape[0], -1)
            contrib = w @ vals
            acc_f[k] = contrib if acc_f[k] is None else acc_f[k] + contrib

    log_z = math.log(acc_w) + shift + float(np.sum(np.log(scale)))
    return log_z, [a / acc_w for a in acc_f]


def _flat(c: np.ndarray) -> np.ndarray:
    return c.reshape(c.shape[0], -1)


def rescaled_rule(model: Model, spec: QuadratureSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Center and width per coordinate: a first pass on the Gaussian scale, then the measured marginals."""
    spec.check(model)
    scale = np.tile(1.0 / np.sqrt(model.lam), model.n_sites)
    _, (m1, m2) = _integrate(model, spec, [_flat, lambda c: _flat(c) ** 2], np.zeros_like(scale), scale)
    var = np.maximum(m2 - m1**2, 1e-300)
    return m1, np.sqrt(var)


class QuadratureResult(BaseModel):
    model_hash: str
    orders: List[int]
    n_points: int
    log_partition: float
    log_partition_gaussian: float
    first_moments: List[List[float]]
    second_moments: List[List[float]]
    observables: Dict[str, float] = Field(default_factory=dict)
    matsubara: Dict[str, float] = Field(default_factory=dict)

    @property
    def log_partition_ratio(self) -> float:
        """log Z relative to the Gaussian reference, i.e. log E_gamma[exp(-action)]."""
        return self.log_partition - self.log_partition_gaussian


def quadrature_moments(model: Model, spec: Optional[QuadratureSpec] = None,
                       observables: Optional[Dict[str, Callable[[np.ndarray], np.ndarray]]] = None,
                       taus: Sequence[float] = ()) -> QuadratureResult:
    """Z, first and second coefficient moments, named observables and E[omega_0(0) omega_0(tau)]."""
    spec = spec or QuadratureSpec.for_model(model)
    center, scale = rescaled_rule(model, spec)

    observables = dict(observables or {})
    n = mode_indices(model.n_modes)
    phi0 = eigenfunction(n, 0.0, model.params)
    for tau in taus:
        phit = eigenfunction(n, float(tau), model.params)
        observables[f"matsubara:{float(tau):g}"] = (
            lambda c, a=phi0, b=phit: (c[:, 0, :] @ a) * (c[:, 0, :] @ b)
        )
    names = list(observables)
    fns = [_flat, lambda c: _flat(c) ** 2] + [observables[k] for k in names]
    log_z, results = _integrate(model, spec, fns, center, scale)

    shape = (model.n_sites, model.n_coeffs)
    log_z_gauss = 0.5 * model.n_sites * float(np.sum(np.log(2.0 * np.pi / model.lam)))
    extra = {k: float(np.squeeze(v)) for k, v in zip(names, results[2:])}
    result = QuadratureResult(
        model_hash=model.hash,
        orders=list(spec.orders),
        n_points=spec.n_points(model.n_sites),
        log_partition=log_z,
        log_partition_gaussian=log_z_gauss,
        first_moments=results[0].reshape(shape).tolist(),
        second_moments=results[1].reshape(shape).tolist(),
        observables={k: v for k, v in extra.items() if not k.startswith("matsubara:")},
        matsubara={k.split(":", 1)[1]: v for k, v in extra.items() if k.startswith("matsubara:")},
    )
    logger.info("quadrature done", extra={"model_hash": model.hash, "n_points": result.n_points})
    return result


class IbpResidual(BaseModel):
    direction: str
    function: str
    mean_derivative: float
    mean_drift_term: float
    residual: float
    relative: float


def quadrature_ibp_residuals(model: Model, test_fns: Sequence, directions: Sequence[Direction],
                             spec: Optional[QuadratureSpec] = None) -> List[IbpResidual]:
    """E[d_h f] + E[f b_h] by quadrature, relative to E|d_h f| + E|f b_h|.

    Test functions need value(c) and derivative_along(c, h).
    """
    spec = spec or QuadratureSpec.for_model(model)
    center, scale = rescaled_rule(model, spec)
    hs = [direction_array(model, d) for d in directions]

    def terms(c):
        cols = []
        for d, h in zip(directions, hs):
            b = logderiv_along(model, c, d)
            for f in test_fns:
                df = f.derivative_along(c, h)
                fb = f.value(c) * b
                cols.extend([df, fb, np.abs(df), np.abs(fb)])
        return np.stack(cols, axis=-1)

    _, (means,) = _integrate(model, spec, [terms], center, scale)
    means = means.reshape(len(directions), len(test_fns), 4)
    out = []
    for a, d in enumerate(directions):
        for b, f in enumerate(test_fns):
            df, fb, adf, afb = means[a, b]
            residual = float(df + fb)
            denom = float(adf + afb)
            out.append(IbpResidual(
                direction=d.label, function=f.name, mean_derivative=float(df), mean_drift_term=float(fb),
                residual=residual, relative=abs(residual) / denom if denom > 0 else 0.0,
            ))
    return out


# ---------------------------------------------------------
# Exact diagonalization
# ---------------------------------------------------------
@dataclass(frozen=True)
class HermiteBasis:
    """First dim eigenstates of p^2/2m + a^2 q^2/2 (hbar = 1)."""

    dim: int
    params: OscillatorParams

    def __post_init__(self):
        if self.dim < 2:
            raise DomainError(f"basis needs dim >= 2, got {self.dim}")

    @property
    def omega(self) -> float:
        return self.params.kappa

    @property
    def ground_state_q2(self) -> float:
        """<0|q^2|0> = 1 / (2 a sqrt(m))."""
        return 1.0 / (2.0 * self.params.rigidity * math.sqrt(self.params.mass))

    def energies(self, size: Optional[int] = None) -> np.ndarray:
        return self.omega * (np.arange(size or self.dim) + 0.5)

    def q_matrix(self, size: Optional[int] = None) -> np.ndarray:
        size = size or self.dim
        off = np.sqrt(np.arange(1, size) * self.ground_state_q2)
        return np.diag(off, 1) + np.diag(off, -1)


def _poly_matrix(coeffs: Sequence[float], Q: np.ndarray) -> np.ndarray:
    """sum_k coeffs[k] Q^k by Horner's rule."""
    eye = np.eye(Q.shape[0])
    out = np.zeros_like(Q)
    for c in reversed(list(coeffs)):
        out = out @ Q + c * eye
    return out


def _polynomial_coefficients(pot: OneSitePotential) -> List[float]:
    if not isinstance(pot, PolynomialPotential):
        raise DomainError("exact diagonalization needs a polynomial potential")
    return [pot.constant] + list(pot.coefficients)


def _check_taus(taus: Sequence[float], beta: float) -> List[float]:
    taus = [float(t) for t in taus]
    if any(t < 0 or t > beta for t in taus):
        raise DomainError(f"time points must lie in [0, beta={beta}]")
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise DomainError(f"time points must be ordered, got {taus}")
    return taus


class EDResult(BaseModel):
    value: float
    dim: int
    trace_tail: float
    ground_energy: float
    gap: float
    doubling_delta: Optional[float] = None


def _ed_solve(coeffs: List[float], basis: HermiteBasis, observables: Sequence[Sequence[float]]):
    dim = basis.dim
    size = dim + len(coeffs) + max((len(o) for o in observables), default=1)
    Q = basis.q_matrix(size)
    H = np.diag(basis.energies(dim)) + _poly_matrix(coeffs, Q)[:dim, :dim]
    E, U = eigh(H)
    ops = [U.T @ _poly_matrix(o, Q)[:dim, :dim] @ U for o in observables]
    return E, ops


def _trace_tail(E: np.ndarray, beta: float) -> float:
    w = np.exp(-beta * (E - E[0]))
    cut = int(math.floor(0.9 * E.size))
    return float(np.sum(w[cut:]) / np.sum(w))


def _ed_value(E: np.ndarray, ops: Sequence[np.ndarray], taus: Sequence[float], beta: float) -> float:
    """Tr(e^{-(beta-t_n)H} A_n ... A_1 e^{-(t_1-t_0)H} A_0 e^{-t_0 H}) / Tr e^{-beta H} in the eigenbasis."""
    e = E - E[0]
    X = np.diag(np.exp(-taus[0] * e)) if taus else np.eye(e.size)
    prev = taus[0] if taus else 0.0
    for A, t in zip(ops, taus):
        X = np.exp(-(t - prev) * e)[:, None] * X
        X = A @ X
        prev = t
    X = np.exp(-(beta - prev) * e)[:, None] * X
    return float(np.trace(X) / np.sum(np.exp(-beta * e)))


def ed_matsubara(pot: OneSitePotential, p: OscillatorParams, taus: Sequence[float],
                 observables: Sequence[Sequence[float]], basis: Optional[HermiteBasis] = None,
                 certify: bool = False) -> EDResult:
    """Matsubara function of polynomial observables (constant-first coefficients in q).

    The basis doubles until the top 10% of levels carry less than ED_TRACE_TAIL of
    Tr e^{-beta H}. With certify=True the value is recomputed at twice that size.
    """
    taus = _check_taus(taus, p.beta)
    if len(observables) != len(taus):
        raise DomainError("need one time point per observable")
    coeffs = _polynomial_coefficients(pot)
    basis = basis or HermiteBasis(config.ED_DEFAULT_DIM, p)

    while True:
        E, ops = _ed_solve(coeffs, basis, observables)
        tail = _trace_tail(E, p.beta)
        if tail < config.ED_TRACE_TAIL:
            break
        if 2 * basis.dim > config.ED_MAX_DIM:
            raise BasisSizeError(f"trace tail {tail:.2e} at dim={basis.dim}; ED_MAX_DIM={config.ED_MAX_DIM}")
        logger.info("ed basis doubled", extra={"dim": 2 * basis.dim, "trace_tail": tail})
        basis = HermiteBasis(2 * basis.dim, p)

    value = _ed_value(E, ops, taus, p.beta)
    result = EDResult(value=value, dim=basis.dim, trace_tail=tail, ground_energy=float(E[0]),
                      gap=float(E[1] - E[0]))
    if certify:
        E2, ops2 = _ed_solve(coeffs, HermiteBasis(2 * basis.dim, p), observables)
        result.doubling_delta = abs(_ed_value(E2, ops2, taus, p.beta) - value)
    return result


# ---------------------------------------------------------
# Harmonic lattice
# ---------------------------------------------------------
class CovarianceTable(BaseModel):
    model_hash: str
    tau: float
    tau2: float
    cutoff: int
    sites: List[str]
    momentum_rigidities: List[float]
    covariance: List[List[float]]

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.covariance)


def _quadratic_part(model: Model) -> float:
    """b_2 of a uniform V = b_2 q^2 (+ constant); anything else is a DomainError."""
    base = model.potentials[0]
    if any(p is not base and p != base for p in model.potentials):
        raise DomainError("harmonic covariance needs the same potential on every site")
    if not isinstance(base, PolynomialPotential) or base.degree > 2:
        raise DomainError("harmonic covariance needs a quadratic one-site potential")
    b = base.coefficients
    if b and b[0] != 0:
        raise DomainError("harmonic covariance needs a centred potential (no linear term)")
    return b[1] if len(b) > 1 else 0.0


def harmonic_rigidities(model: Model) -> Tuple[np.ndarray, np.ndarray]:
    """Lattice momenta (n_sites, d) and the shifted rigidity squared of each momentum mode."""
    b2 = _quadratic_part(model)
    c = model.coupling
    if c.is_active:
        if c.kind != HARMONIC_NN:
            raise DomainError(f"harmonic covariance needs harmonic_nn coupling, got {c.kind}")
        if model.geometry.boundary_mode != PERIODIC:
            raise DomainError("harmonic covariance with coupling needs the periodic boundary")
    J = c.strength if c.is_active else 0.0
    axes = [2.0 * np.pi * np.arange(L) / L for L in model.geometry.shape]
    momenta = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(axes), -1).T
    a2 = model.params.rigidity**2 + 2.0 * b2 + 4.0 * J * np.sum(1.0 - np.cos(momenta), axis=1)
    return momenta, a2


def harmonic_lattice_cov(model: Model, tau: float = 0.0, tau2: float = 0.0,
                         cutoff: Optional[int] = None) -> CovarianceTable:
    """E[omega_k(tau) omega_j(tau2)] as a momentum sum of Green functions at shifted rigidity.

    cutoff defaults to the model's mode count so the table matches the truncated measure.
    """
    cutoff = model.n_modes if cutoff is None else cutoff
    momenta, a2 = harmonic_rigidities(model)
    greens = np.array([
        green(tau, tau2, model.params.with_rigidity(math.sqrt(r)), GREEN_SERIES, max(cutoff, 0))
        if cutoff > 0 else 1.0 / (model.params.beta * r)
        for r in a2
    ])
    sites = np.array(model.sites, dtype=float)
    diff = sites[:, None, :] - sites[None, :, :]
    phases = np.cos(np.einsum("ijd,pd->ijp", diff, momenta))
    cov = phases @ greens / len(a2)
    return CovarianceTable(
        model_hash=model.hash, tau=tau, tau2=tau2, cutoff=cutoff,
        sites=[site_key(s) for s in model.sites], momentum_rigidities=np.sqrt(a2).tolist(),
        covariance=cov.tolist(),
    )


# ---------------------------------------------------------
# Gaussian structure functions
# ---------------------------------------------------------
def structure_function(p: OscillatorParams, rho, cutoff: int = 10_000, Q: int = 1):
    """E[(omega(tau) - omega(tau + rho))^{2Q}] for the bridge measure: (2Q-1)!! S^Q with S = 2(G(0,0) - G(0,rho))."""
    if int(Q) != Q or Q < 1:
        raise DomainError(f"Q must be a positive integer, got {Q}")
    rho = np.asarray(rho, dtype=float)
    S = 2.0 * (green(0.0, 0.0, p, GREEN_SERIES, cutoff) - green(0.0, rho, p, GREEN_SERIES, cutoff))
    return float(factorial2(2 * int(Q) - 1)) * S ** int(Q)

"""
Single-loop spectral machinery on the circle S_beta.

A loop is stored as truncated coefficients against the orthonormal family
phi_n (n = -N..N) of eigenfunctions of A = -m d^2/dtau^2 + a^2. Coefficient
arrays have length 2N+1 and index n + N holds mode n, so every function here
also accepts stacked arrays of shape (..., 2N+1).
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Union

import numpy as np

import config
from errors import DivergenceError, DomainError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------
# Parameters and grids
# ---------------------------------------------------------
@dataclass(frozen=True)
class OscillatorParams:
    """Mass m, rigidity a (harmonic term a^2 q^2 / 2) and inverse temperature beta."""

    mass: float = 1.0
    rigidity: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("mass", "rigidity", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be a positive finite number, got {value!r}")

    @property
    def kappa(self) -> float:
        return self.rigidity / math.sqrt(self.mass)

    def with_rigidity(self, rigidity: float) -> "OscillatorParams":
        return OscillatorParams(self.mass, rigidity, self.beta)


@dataclass(frozen=True)
class CircleGrid:
    """M equispaced points tau_j = j*beta/M on S_beta."""

    n_points: int
    beta: float

    def __post_init__(self):
        if self.n_points < 1:
            raise DomainError(f"grid needs at least one point, got {self.n_points}")
        if not self.beta > 0:
            raise DomainError(f"beta must be positive, got {self.beta}")

    @classmethod
    def for_modes(cls, p: OscillatorParams, n_modes: int, factor: int = config.GRID_FACTOR):
        return cls(max(factor * n_modes, 2 * n_modes + 2), p.beta)

    @property
    def spacing(self) -> float:
        return self.beta / self.n_points

    @property
    def tau(self) -> np.ndarray:
        return np.arange(self.n_points) * self.spacing

    def circle_distance(self, tau, tau2):
        d = np.abs(np.asarray(tau, dtype=float) - np.asarray(tau2, dtype=float)) % self.beta
        return np.minimum(d, self.beta - d)


def mode_indices(n_modes: int) -> np.ndarray:
    if n_modes < 0:
        raise DomainError(f"n_modes must be >= 0, got {n_modes}")
    return np.arange(-n_modes, n_modes + 1)


# ---------------------------------------------------------
# Spectrum and eigenfunctions of A
# ---------------------------------------------------------
def spectrum(n, p: OscillatorParams):
    """lambda_n = (2 pi n / beta)^2 m + a^2. Accepts scalars or arrays."""
    n = np.asarray(n, dtype=float)
    lam = (2.0 * np.pi * n / p.beta) ** 2 * p.mass + p.rigidity**2
    return lam[()] if lam.ndim == 0 else lam


def eigenfunction(n, tau, p: OscillatorParams):
    """phi_n(tau): constant for n=0, cosine for n>0, negative sine for n<0."""
    n = np.asarray(n)
    tau = np.asarray(tau, dtype=float)
    angle = 2.0 * np.pi * n * tau / p.beta
    amp = math.sqrt(2.0 / p.beta)
    out = np.where(
        n > 0,
        amp * np.cos(angle),
        np.where(n < 0, -amp * np.sin(angle), 1.0 / math.sqrt(p.beta)),
    )
    return out[()] if out.ndim == 0 else out


@lru_cache(maxsize=64)
def basis_matrix(p: OscillatorParams, n_modes: int, n_points: int) -> np.ndarray:
    """Phi[j, n+N] = phi_n(tau_j) on the uniform grid. Read-only."""
    grid = CircleGrid(n_points, p.beta)
    phi = eigenfunction(mode_indices(n_modes)[None, :], grid.tau[:, None], p)
    phi = np.ascontiguousarray(phi, dtype=float)
    phi.flags.writeable = False
    return phi


def mode_spectrum(p: OscillatorParams, n_modes: int) -> np.ndarray:
    return spectrum(mode_indices(n_modes), p)


def synthesize(coeffs: np.ndarray, p: OscillatorParams, grid: CircleGrid) -> np.ndarray:
    """Grid values of coefficient arrays (..., 2N+1) -> (..., M)."""
    coeffs = np.asarray(coeffs, dtype=float)
    n_modes = (coeffs.shape[-1] - 1) // 2
    return coeffs @ basis_matrix(p, n_modes, grid.n_points).T


def analyze(values: np.ndarray, p: OscillatorParams, n_modes: int) -> np.ndarray:
    """Rectangle-rule projection of grid values (..., M) onto modes |n| <= n_modes."""
    values = np.asarray(values, dtype=float)
    m = values.shape[-1]
    if m < 2 * n_modes + 1:
        raise DomainError(f"grid of {m} points cannot resolve {n_modes} modes")
    return (p.beta / m) * (values @ basis_matrix(p, n_modes, m))


def evaluate_at(coeffs: np.ndarray, p: OscillatorParams, tau) -> np.ndarray:
    """Loop values at arbitrary points: (..., 2N+1) x taus -> (..., len(taus))."""
    coeffs = np.asarray(coeffs, dtype=float)
    n_modes = (coeffs.shape[-1] - 1) // 2
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    phi = eigenfunction(mode_indices(n_modes)[None, :], tau[:, None], p)
    return coeffs @ phi.T


# ---------------------------------------------------------
# Spectral loops
# ---------------------------------------------------------
@dataclass(frozen=True, eq=False)
class SpectralLoop:
    """One site's loop as coefficients c_n against phi_n, |n| <= N."""

    coeffs: np.ndarray
    params: OscillatorParams

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.size % 2 != 1:
            raise DomainError(f"coefficient array must have odd length 2N+1, got {c.size}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, p: OscillatorParams, n_modes: int):
        return cls(np.zeros(2 * n_modes + 1), p)

    @classmethod
    def basis(cls, n: int, p: OscillatorParams, n_modes: int):
        if abs(n) > n_modes:
            raise DomainError(f"mode {n} outside |n| <= {n_modes}")
        c = np.zeros(2 * n_modes + 1)
        c[n + n_modes] = 1.0
        return cls(c, p)

    @classmethod
    def constant(cls, value: float, p: OscillatorParams, n_modes: int):
        c = np.zeros(2 * n_modes + 1)
        c[n_modes] = value * math.sqrt(p.beta)
        return cls(c, p)

    @classmethod
    def from_values(cls, values, p: OscillatorParams, n_modes: Optional[int] = None):
        values = np.asarray(values, dtype=float)
        if n_modes is None:
            n_modes = (values.shape[-1] - 2) // 2
        return cls(analyze(values, p, n_modes), p)

    @property
    def n_modes(self) -> int:
        return (self.coeffs.size - 1) // 2

    def coefficient(self, n: int) -> float:
        if abs(n) > self.n_modes:
            return 0.0
        return float(self.coeffs[n + self.n_modes])

    def values(self, grid: CircleGrid) -> np.ndarray:
        return synthesize(self.coeffs, self.params, grid)

    def __call__(self, tau):
        return evaluate_at(self.coeffs, self.params, tau)

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


def apply_A(f: SpectralLoop) -> SpectralLoop:
    return SpectralLoop(mode_spectrum(f.params, f.n_modes) * f.coeffs, f.params)


def apply_A_inverse(f: SpectralLoop) -> SpectralLoop:
    return SpectralLoop(f.coeffs / mode_spectrum(f.params, f.n_modes), f.params)


# ---------------------------------------------------------
# Green function
# ---------------------------------------------------------
GREEN_SERIES = "series"
GREEN_CLOSED_FORM = "closed_form"
GREEN_EXACT = "exact"


def _green_series(x, p: OscillatorParams, cutoff: int):
    x = np.asarray(x, dtype=float)
    total = np.full(x.shape, 1.0 / (p.beta * p.rigidity**2))
    w = 2.0 * np.pi / p.beta
    for start in range(1, cutoff + 1, 4096):
        n = np.arange(start, min(start + 4096, cutoff + 1), dtype=float)
        lam = spectrum(n, p)
        total = total + (2.0 / p.beta) * np.sum(
            np.cos(w * x[..., None] * n) / lam, axis=-1
        )
    return total


def closed_form_prefactor(p: OscillatorParams) -> float:
    """The prefactor [2 a sqrt(m) (1 - e^{-kappa beta})]^{-1} of the exponential form."""
    return 1.0 / (2.0 * p.rigidity * math.sqrt(p.mass) * (1.0 - math.exp(-p.kappa * p.beta)))


def green(tau, tau2, p: OscillatorParams, method: str = GREEN_SERIES, cutoff: int = 10_000):
    """Integral kernel of A^{-1}.

    series       sum over |n| <= cutoff of phi_n(tau) phi_n(tau2) / lambda_n
    closed_form  (g/2)(e^{-kappa(beta-|x|)} + e^{-kappa|x|}) with g = closed_form_prefactor
    exact        cutoff -> infinity limit of the series (hyperbolic form)

    The series is the authoritative value; closed_form is half of it for every
    parameter set and is kept for the discrepancy report.
    """
    x = (np.asarray(tau, dtype=float) - np.asarray(tau2, dtype=float)) % p.beta
    if method == GREEN_SERIES:
        if cutoff < 1:
            raise DomainError(f"series cutoff must be >= 1, got {cutoff}")
        out = _green_series(x, p, cutoff)
    elif method == GREEN_CLOSED_FORM:
        g = closed_form_prefactor(p)
        out = 0.5 * g * (np.exp(-p.kappa * (p.beta - x)) + np.exp(-p.kappa * x))
    elif method == GREEN_EXACT:
        k, b = p.kappa, p.beta
        out = np.cosh(k * (0.5 * b - x)) / (2.0 * p.rigidity * math.sqrt(p.mass) * math.sinh(0.5 * k * b))
    else:
        raise DomainError(f"unknown Green method {method!r}")
    out = np.asarray(out, dtype=float)
    return out[()] if out.ndim == 0 else out


def green_report(p: OscillatorParams, tau: float = 0.0, tau2: float = 0.0, cutoff: int = 10_000) -> dict:
    """Series and closed-form values side by side with their ratio."""
    series = float(green(tau, tau2, p, GREEN_SERIES, cutoff))
    closed = float(green(tau, tau2, p, GREEN_CLOSED_FORM))
    report = {
        "tau": tau,
        "tau2": tau2,
        "cutoff": cutoff,
        "series": series,
        "closed_form": closed,
        "exact_limit": float(green(tau, tau2, p, GREEN_EXACT)),
        "ratio_series_to_closed_form": series / closed,
        "authoritative": GREEN_SERIES,
    }
    logger.info("green discrepancy", extra={"series": series, "closed_form": closed,
                                            "ratio": report["ratio_series_to_closed_form"]})
    return report


def green_lipschitz_constant(p: OscillatorParams, convention: str = GREEN_SERIES) -> float:
    """Lipschitz constant g*a/sqrt(m) of tau -> G(tau, .) under either prefactor convention."""
    g = closed_form_prefactor(p)
    if convention == GREEN_SERIES:
        g *= 2.0
    elif convention != GREEN_CLOSED_FORM:
        raise DomainError(f"unknown convention {convention!r}")
    return g * p.kappa


def green_loop(tau: float, p: OscillatorParams, cutoff: int) -> SpectralLoop:
    """G_tau = A^{-1} delta_tau truncated to |n| <= cutoff."""
    n = mode_indices(cutoff)
    return SpectralLoop(eigenfunction(n, tau, p) / spectrum(n, p), p)


# ---------------------------------------------------------
# Traces
# ---------------------------------------------------------
class TracePower(NamedTuple):
    value: float
    tail_bound: float


def trace_power(alpha: float, p: OscillatorParams, cutoff: int) -> TracePower:
    """Sum over |n| <= cutoff of lambda_n^{alpha-1}, with an integral-test tail bound."""
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    if alpha >= 0.5:
        raise DivergenceError(f"Tr A^(alpha-1) diverges for alpha >= 1/2 (alpha={alpha})")
    if cutoff < 1:
        raise DomainError(f"cutoff must be >= 1, got {cutoff}")

    n = np.arange(1, cutoff + 1, dtype=float)
    value = p.rigidity ** (2.0 * (alpha - 1.0)) + 2.0 * float(np.sum(spectrum(n, p) ** (alpha - 1.0)))

    c2m = (2.0 * np.pi / p.beta) ** 2 * p.mass
    tail = 2.0 * c2m ** (alpha - 1.0) * cutoff ** (2.0 * alpha - 1.0) / (1.0 - 2.0 * alpha)
    return TracePower(value, tail)


# ---------------------------------------------------------
# Gaussian bridge sampler
# ---------------------------------------------------------
def bridge_scales(p: OscillatorParams, n_modes: int) -> np.ndarray:
    return 1.0 / np.sqrt(mode_spectrum(p, n_modes))


def sample_bridge(p: OscillatorParams, n_modes: int, rng: np.random.Generator,
                  size: Optional[int] = None) -> Union[SpectralLoop, np.ndarray]:
    """Draw from the oscillator bridge measure: c_n ~ N(0, 1/lambda_n) independently.

    With size=None a SpectralLoop is returned; otherwise an array (size, 2N+1).
    """
    scales = bridge_scales(p, n_modes)
    if size is None:
        return SpectralLoop(scales * rng.standard_normal(scales.size), p)
    return scales * rng.standard_normal((size, scales.size))


# ---------------------------------------------------------
# Partial sums and smoothing
# ---------------------------------------------------------
FOURIER = "fourier"
CESARO = "cesaro"


def partial_sums(f, K: int, kind: str = FOURIER, params: Optional[OscillatorParams] = None) -> SpectralLoop:
    """Fourier partial sum S_K f or Cesaro mean M_K f = (K+1)^{-1} sum_{L<=K} S_L f.

    f is a SpectralLoop or grid values (then params is required and the values
    are analysed on all modes the grid resolves).
    """
    if K < 0:
        raise DomainError(f"K must be >= 0, got {K}")
    if not isinstance(f, SpectralLoop):
        if params is None:
            raise DomainError("grid loops need OscillatorParams")
        f = SpectralLoop.from_values(f, params)

    n = np.abs(mode_indices(f.n_modes))
    if kind == FOURIER:
        weights = (n <= K).astype(float)
    elif kind == CESARO:
        weights = np.clip((K + 1.0 - n) / (K + 1.0), 0.0, None)
    else:
        raise DomainError(f"unknown partial-sum kind {kind!r}")
    return SpectralLoop(weights * f.coeffs, f.params)


def yosida(tau: float, K: float, p: OscillatorParams, cutoff: int) -> SpectralLoop:
    """phi_tau^(K) = (1 + A/K)^{-1} G_tau: mode n gets lambda_n^{-1} phi_n(tau) / (1 + lambda_n/K)."""
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    n = mode_indices(cutoff)
    lam = spectrum(n, p)
    return SpectralLoop(eigenfunction(n, tau, p) / lam / (1.0 + lam / K), p)


# ---------------------------------------------------------
# Norms
# ---------------------------------------------------------
SUP = "sup"
LR = "lr"
HOELDER = "hoelder"
SOBOLEV = "sobolev"


@dataclass(frozen=True)
class LoopNormKind:
    kind: str
    exponent: float = 0.0

    def __post_init__(self):
        if self.kind == LR and self.exponent < 1:
            raise DomainError(f"L^r needs r >= 1, got {self.exponent}")
        if self.kind in (HOELDER, SOBOLEV) and not 0.0 <= self.exponent < 0.5:
            raise DomainError(f"{self.kind} exponent must lie in [0, 1/2), got {self.exponent}")
        if self.kind not in (SUP, LR, HOELDER, SOBOLEV):
            raise DomainError(f"unknown norm kind {self.kind!r}")

    @classmethod
    def sup(cls):
        return cls(SUP)

    @classmethod
    def lr(cls, r: float):
        return cls(LR, float(r))

    @classmethod
    def hoelder(cls, alpha: float):
        return cls(HOELDER, float(alpha))

    @classmethod
    def sobolev(cls, alpha: float):
        return cls(SOBOLEV, float(alpha))

    @property
    def label(self) -> str:
        if self.kind == HOELDER:
            return f"grid-hoelder({self.exponent:g})"
        if self.kind == SUP:
            return "sup"
        return f"{self.kind}({self.exponent:g})"


def grid_norm(values: np.ndarray, grid: CircleGrid, kind: LoopNormKind) -> np.ndarray:
    """Sup, L^r and grid-Hoelder norms of grid values (..., M), vectorized over leading axes."""
    values = np.asarray(values, dtype=float)
    if kind.kind == SUP:
        return np.max(np.abs(values), axis=-1)
    if kind.kind == LR:
        r = kind.exponent
        return (grid.spacing * np.sum(np.abs(values) ** r, axis=-1)) ** (1.0 / r)
    if kind.kind == HOELDER:
        sup = np.max(np.abs(values), axis=-1)
        semi = np.zeros(values.shape[:-1])
        for lag in range(1, grid.n_points // 2 + 1):
            diff = np.max(np.abs(values - np.roll(values, lag, axis=-1)), axis=-1)
            semi = np.maximum(semi, diff / (lag * grid.spacing) ** kind.exponent)
        return sup + semi
    raise DomainError(f"{kind.kind} is not a grid norm")


def sobolev_norm(coeffs: np.ndarray, p: OscillatorParams, alpha: float) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    lam = mode_spectrum(p, (coeffs.shape[-1] - 1) // 2)
    return np.sqrt(np.sum(lam**alpha * coeffs**2, axis=-1))


def loop_norm(f: SpectralLoop, grid: CircleGrid, kind: LoopNormKind) -> float:
    if kind.kind == SOBOLEV:
        return float(sobolev_norm(f.coeffs, f.params, kind.exponent))
    if kind.kind in (SUP, HOELDER) and grid.n_points < 4 * f.n_modes:
        raise DomainError(
            f"{kind.label} needs a grid with M >= 4N ({4 * f.n_modes}), got {grid.n_points}"
        )
    return float(grid_norm(f.values(grid), grid, kind))

"""
Statistical and analytic checks of the Gibbs characterizations.

Verdicts are two-sided z-tests (|z| <= threshold, batch-means SE) for exact
identities, or one-sided bound checks for scaling and uniformity statements.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import config
from errors import DependencyError, DomainError, InsufficientDataError
from gibbs import (
    Direction,
    ShiftDirection,
    batch_means,
    direction_array,
    effective_sample_size,
    log_cocycle_batch,
    logderiv_along,
    resample_block,
)
from interaction import (
    EXPONENTIAL,
    POLYNOMIAL,
    Model,
    PolynomialPotential,
    WeightSystem,
    check_V_assumptions,
    drift_field,
    k3_threshold,
    k3_threshold_moment,
    site_key,
    triple_seminorm,
)
from loop_core import (
    GREEN_CLOSED_FORM,
    GREEN_EXACT,
    GREEN_SERIES,
    LoopNormKind,
    eigenfunction,
    green,
    green_lipschitz_constant,
    grid_norm,
    mode_indices,
    sobolev_norm,
)
from oracle import structure_function

logger = logging.getLogger(__name__)

TWO_SIDED = "two-sided"
UPPER_BOUND = "upper-bound"
LOWER_BOUND = "lower-bound"
PROPERTY = "property"

CATALOG_VERSION = "1"


class TestVerdict(BaseModel):
    __test__ = False
    model_config = ConfigDict(populate_by_name=True)

    test: str
    equation: str
    statistic: float
    se: float
    z: float
    threshold: float = config.Z_THRESHOLD
    passed: bool = Field(..., alias="pass")
    n: int
    kind: str = TWO_SIDED
    bound: Optional[float] = None
    seed: Optional[int] = None
    model_hash: str = ""
    metadata: Dict[str, Any] = Field(default_factory=dict)


def _z_verdict(test: str, equation: str, series: np.ndarray, model: Model,
               threshold: float = config.Z_THRESHOLD, seed: Optional[int] = None, **metadata) -> TestVerdict:
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise InsufficientDataError(f"{test}: no samples for a verdict on {equation}")
    stat, se = batch_means(series)
    if np.all(series == series[0]):
        stat, se = float(series[0]), 0.0
    if se > 0:
        z = stat / se
    else:
        z = 0.0 if stat == 0 else math.copysign(math.inf, stat)
    return TestVerdict(test=test, equation=equation, statistic=stat, se=se, z=z, threshold=threshold,
                       passed=bool(abs(z) <= threshold), n=int(series.size), seed=seed,
                       model_hash=model.hash, metadata=metadata)


def _require_data(series: np.ndarray, what: str):
    series = np.asarray(series, dtype=float)
    if series.size < config.MIN_EFFECTIVE_SAMPLES:
        raise InsufficientDataError(f"{what}: {series.size} samples, need {config.MIN_EFFECTIVE_SAMPLES}")
    if np.ptp(series) > 0:
        ess = effective_sample_size(series)
        if ess < config.MIN_EFFECTIVE_SAMPLES:
            raise InsufficientDataError(f"{what}: effective sample size {ess:.0f} < {config.MIN_EFFECTIVE_SAMPLES}")


# ---------------------------------------------------------
# Test functions
# ---------------------------------------------------------
@dataclass(frozen=True, eq=False)
class TestFunction:
    """f(c) = g(U c_k) for a few linear functionals U of one site's coefficients."""

    __test__ = False

    name: str
    site_index: int
    functionals: np.ndarray
    g: Callable[[np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray], np.ndarray]

    def _ell(self, c: np.ndarray) -> np.ndarray:
        return np.asarray(c)[..., self.site_index, :] @ self.functionals.T

    def value(self, c: np.ndarray) -> np.ndarray:
        return self.g(self._ell(c))

    def derivative_along(self, c: np.ndarray, h: np.ndarray) -> np.ndarray:
        dh = np.asarray(h)[..., self.site_index, :] @ self.functionals.T
        return np.sum(self.dg(self._ell(c)) * dh, axis=-1)


def coefficient_functional(model: Model, n: int) -> np.ndarray:
    """c -> c_n, with n clipped to the model's modes."""
    u = np.zeros(model.n_coeffs)
    u[int(np.clip(n, -model.n_modes, model.n_modes)) + model.n_modes] = 1.0
    return u


def point_functional(model: Model, tau: float) -> np.ndarray:
    """c -> omega(tau)."""
    return eigenfunction(mode_indices(model.n_modes), tau, model.params)


def constant_function(name: str, i: int, u: np.ndarray) -> TestFunction:
    return TestFunction(name, i, np.atleast_2d(u), lambda l: np.ones(l.shape[:-1]), np.zeros_like)


def linear_function(name: str, i: int, u: np.ndarray) -> TestFunction:
    return TestFunction(name, i, np.atleast_2d(u), lambda l: l[..., 0], np.ones_like)


def cosine_function(name: str, i: int, u: np.ndarray, k: float = 1.0, phase: float = 0.0) -> TestFunction:
    return TestFunction(name, i, np.atleast_2d(u),
                        lambda l: np.cos(k * l[..., 0] + phase),
                        lambda l: -k * np.sin(k * l + phase))


def gaussian_function(name: str, i: int, u: np.ndarray, s: float = 1.0) -> TestFunction:
    return TestFunction(name, i, np.atleast_2d(u),
                        lambda l: np.exp(-0.5 * (l[..., 0] / s) ** 2),
                        lambda l: -l / s**2 * np.exp(-0.5 * (l / s) ** 2))


def tanh_function(name: str, i: int, u: np.ndarray) -> TestFunction:
    return TestFunction(name, i, np.atleast_2d(u), lambda l: np.tanh(l[..., 0]), lambda l: 1.0 - np.tanh(l) ** 2)


def _cos_times_gauss(name: str, i: int, u: np.ndarray, v: np.ndarray) -> TestFunction:
    def g(l):
        return np.cos(l[..., 0]) * np.exp(-0.5 * l[..., 1] ** 2)

    def dg(l):
        e = np.exp(-0.5 * l[..., 1] ** 2)
        return np.stack([-np.sin(l[..., 0]) * e, -l[..., 1] * np.cos(l[..., 0]) * e], axis=-1)

    return TestFunction(name, i, np.stack([u, v]), g, dg)


def _gauss_of_difference(name: str, i: int, u: np.ndarray, v: np.ndarray) -> TestFunction:
    def g(l):
        return np.exp(-0.5 * (l[..., 0] - l[..., 1]) ** 2)

    def dg(l):
        d = l[..., 0] - l[..., 1]
        e = -d * np.exp(-0.5 * d**2)
        return np.stack([e, -e], axis=-1)

    return TestFunction(name, i, np.stack([u, v]), g, dg)


def function_catalog(model: Model, site=None) -> List[TestFunction]:
    """The fixed battery of 20 bounded test functions at one site."""
    site = model.sites[0] if site is None else (tuple(site) if not isinstance(site, int) else (site,))
    if site not in model.site_index:
        raise DomainError(f"site {site} is outside the volume")
    i = model.site_index[site]
    c = lambda n: coefficient_functional(model, n)
    w = lambda tau: point_functional(model, tau * model.params.beta)
    return [
        constant_function("one", i, c(0)),
        linear_function("c0", i, c(0)),
        cosine_function("cos(c0)", i, c(0)),
        cosine_function("sin(c0)", i, c(0), phase=-0.5 * math.pi),
        cosine_function("cos(2c0+0.3)", i, c(0), k=2.0, phase=0.3),
        gaussian_function("gauss(c0)", i, c(0), 1.0),
        gaussian_function("gauss(c0,0.5)", i, c(0), 0.5),
        tanh_function("tanh(c0)", i, c(0)),
        cosine_function("cos(c1)", i, c(1)),
        cosine_function("sin(c-1)", i, c(-1), phase=-0.5 * math.pi),
        gaussian_function("gauss(c1,0.3)", i, c(1), 0.3),
        tanh_function("tanh(c-1)", i, c(-1)),
        cosine_function("cos(c2)", i, c(2)),
        gaussian_function("gauss(c-2,0.2)", i, c(-2), 0.2),
        cosine_function("cos(w(0))", i, w(0.0)),
        cosine_function("sin(w(b/4)+0.5)", i, w(0.25), phase=0.5 - 0.5 * math.pi),
        gaussian_function("gauss(w(b/2))", i, w(0.5)),
        tanh_function("tanh(w(0))", i, w(0.0)),
        _cos_times_gauss("cos(c0)gauss(c1)", i, c(0), c(1)),
        _gauss_of_difference("gauss(w(0)-w(b/2))", i, w(0.0), w(0.5)),
    ]


def default_directions(model: Model, site=None) -> List[Direction]:
    site = model.sites[0] if site is None else site
    return [ShiftDirection(site, n) for n in mode_indices(min(model.n_modes, 2))]


# ---------------------------------------------------------
# IbP, flow and DLR tests
# ---------------------------------------------------------
def ibp_test(model: Model, samples: np.ndarray, directions: Sequence[Direction],
             test_fns: Optional[Sequence[TestFunction]] = None, threshold: float = config.Z_THRESHOLD,
             seed: Optional[int] = None) -> List[TestVerdict]:
    """E[d_h f] + E[f b_h] = 0 for every (direction, f)."""
    samples = np.asarray(samples, dtype=float)
    test_fns = function_catalog(model) if test_fns is None else test_fns
    verdicts = []
    for d in directions:
        h = direction_array(model, d)
        b = logderiv_along(model, samples, d)
        for f in test_fns:
            series = f.derivative_along(samples, h) + f.value(samples) * b
            _require_data(series, f"ibp {d.label} {f.name}")
            verdicts.append(_z_verdict(
                "ibp", "E[d_h f] + E[f b_h] = 0", series, model, threshold, seed,
                direction=d.label, function=f.name, catalog=CATALOG_VERSION,
            ))
    logger.info("ibp suite", extra={"model_hash": model.hash, "n_verdicts": len(verdicts),
                                    "failed": sum(not v.passed for v in verdicts)})
    return verdicts


def flow_test(model: Model, samples: np.ndarray, direction: Direction, theta: float,
              test_fns: Optional[Sequence[TestFunction]] = None, threshold: float = config.Z_THRESHOLD,
              seed: Optional[int] = None) -> List[TestVerdict]:
    """E[f(omega) a_{theta h}(omega)] - E[f(omega - theta h)] = 0."""
    samples = np.asarray(samples, dtype=float)
    test_fns = function_catalog(model) if test_fns is None else test_fns
    shifted = dataclasses.replace(direction, theta=theta)
    h = theta * direction_array(model, direction)
    with np.errstate(over="ignore"):
        weight = np.exp(log_cocycle_batch(model, samples, shifted))
    verdicts = []
    for f in test_fns:
        series = f.value(samples) * weight - f.value(samples - h)
        if theta != 0:
            _require_data(series, f"flow {direction.label} {f.name}")
        verdicts.append(_z_verdict(
            "flow", "E[f a_{theta h}] = E[f(. - theta h)]", series, model, threshold, seed,
            direction=direction.label, theta=theta, function=f.name, catalog=CATALOG_VERSION,
        ))
    return verdicts


@dataclass(frozen=True)
class LocalObservable:
    site: Tuple[int, ...]
    tau: float = 0.0
    fn: Callable[[np.ndarray], np.ndarray] = np.square
    name: str = "omega(0)^2"


def square_observables(model: Model, tau: float = 0.0) -> List[LocalObservable]:
    return [LocalObservable(s, tau, np.square, f"omega_{site_key(s)}({tau:g})^2") for s in model.sites]


def dlr_test(model: Model, samples: np.ndarray, subvolume, observables: Optional[Sequence[LocalObservable]] = None,
             n_resweeps: int = 10, step: float = 0.5, seed: int = 0,
             threshold: float = config.Z_THRESHOLD) -> List[TestVerdict]:
    """Re-draw the block Lambda of every sample from pi_Lambda(.|rest) and compare observables before and after."""
    samples = np.asarray(samples, dtype=float)
    block = model.geometry.sub_box(subvolume).sites()
    missing = [s for s in block if s not in model.site_index]
    if missing:
        raise DomainError(f"subvolume {subvolume} is not inside the volume {model.geometry.box}")
    idx = [model.site_index[s] for s in block]
    observables = square_observables(model) if observables is None else observables
    rng = np.random.default_rng(seed)

    phis = {}
    for ob in observables:
        if ob.tau not in phis:
            phis[ob.tau] = eigenfunction(mode_indices(model.n_modes), ob.tau, model.params)

    diffs = np.zeros((samples.shape[0], len(observables)))
    rates = []
    for t, c in enumerate(samples):
        new, rate = resample_block(model, c, idx, n_resweeps, step, rng)
        rates.append(rate)
        for j, ob in enumerate(observables):
            i = model.site_index[tuple(ob.site)]
            diffs[t, j] = ob.fn(new[i] @ phis[ob.tau]) - ob.fn(c[i] @ phis[ob.tau])

    verdicts = []
    for j, ob in enumerate(observables):
        series = diffs[:, j]
        _require_data(series, f"dlr {ob.name}")
        verdicts.append(_z_verdict(
            "dlr", "E[A after block re-draw] = E[A]", series, model, threshold, seed,
            observable=ob.name, subvolume=[list(b) for b in subvolume],
            inside=tuple(ob.site) in block, resweeps=n_resweeps, block_acceptance=float(np.mean(rates)),
        ))
    return verdicts


def zero_mode_square(model: Model, samples: np.ndarray, site_index: int = 0) -> np.ndarray:
    return np.asarray(samples, dtype=float)[:, site_index, model.n_modes] ** 2


def _difference_verdict(test: str, equation: str, diff: float, se: float, n: int, model: Model,
                        threshold: float, seed: Optional[int], **metadata) -> TestVerdict:
    z = diff / se if se > 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))
    return TestVerdict(test=test, equation=equation, statistic=diff, se=se, z=z, threshold=threshold,
                       passed=bool(abs(z) <= threshold), n=n, seed=seed, model_hash=model.hash, metadata=metadata)


def langevin_agreement(model: Model, pcn_samples: np.ndarray, coarse_samples: np.ndarray,
                       fine_samples: np.ndarray, dt: float, exact: Optional[float] = None,
                       threshold: float = config.Z_THRESHOLD, seed: Optional[int] = None) -> List[TestVerdict]:
    """E[c_0^2] from Langevin chains at dt and dt/2, Richardson-extrapolated, against pCN (and an exact value).

    The splitting integrator's bias in averages is O(dt^2), so the extrapolation is (4 v(dt/2) - v(dt)) / 3.
    """
    series = {name: zero_mode_square(model, s) for name, s in
              (("pcn", pcn_samples), ("dt", coarse_samples), ("dt/2", fine_samples))}
    for name, x in series.items():
        _require_data(x, f"langevin {name}")
    stats = {name: batch_means(x) for name, x in series.items()}
    (v1, s1), (v2, s2), (vp, sp) = stats["dt"], stats["dt/2"], stats["pcn"]
    extrapolated = (4.0 * v2 - v1) / 3.0
    ext_se = math.sqrt(16.0 * s2**2 + s1**2) / 3.0
    n = int(min(x.size for x in series.values()))
    meta = {"observable": "c_0^2", "dt": dt, "langevin_dt": v1, "langevin_dt2": v2,
            "langevin_extrapolated": extrapolated, "pcn": vp}

    verdicts = [_difference_verdict("langevin", "E[c_0^2] Langevin (dt -> 0) = pCN", extrapolated - vp,
                                    math.hypot(ext_se, sp), n, model, threshold, seed, **meta)]
    if exact is not None:
        verdicts.append(_difference_verdict("langevin", "E[c_0^2] Langevin (dt -> 0) = quadrature",
                                            extrapolated - exact, ext_se, n, model, threshold, seed,
                                            exact=exact, **meta))
        verdicts.append(_difference_verdict("langevin", "E[c_0^2] pCN = quadrature", vp - exact, sp, n, model,
                                            threshold, seed, exact=exact, **meta))
    return verdicts


# ---------------------------------------------------------
# Moments across a volume ladder
# ---------------------------------------------------------
HOELDER_MOMENT = "hoelder"
SOBOLEV_MOMENT = "sobolev"
COERCIVE_MOMENT = "coercive"
DRIFT_MOMENT = "drift_l1"


class MomentRow(BaseModel):
    volume: int
    n_sites: int
    quantity: str
    Q: float
    alpha: Optional[float] = None
    site: str
    mean: float
    se: float


def site_moment_series(model: Model, samples: np.ndarray, quantity: str, Q: float,
                       alpha: Optional[float] = None, chunk: int = 1024) -> np.ndarray:
    """Per-sample, per-site values (S, n_sites) of the chosen norm raised to Q."""
    samples = np.asarray(samples, dtype=float)
    out = np.empty(samples.shape[:2])
    for start in range(0, samples.shape[0], chunk):
        c = samples[start:start + chunk]
        if quantity == SOBOLEV_MOMENT:
            val = sobolev_norm(c, model.params, alpha)
        else:
            values = model.values(c)
            if quantity == HOELDER_MOMENT:
                val = grid_norm(values, model.grid, LoopNormKind.hoelder(alpha))
            elif quantity == COERCIVE_MOMENT:
                v1 = np.stack([model.potentials[i].eval(values[:, i], 1) for i in range(model.n_sites)], axis=1)
                val = np.abs(model.weight * np.sum(v1 * values, axis=-1))
            elif quantity == DRIFT_MOMENT:
                val = model.weight * np.sum(np.abs(drift_field(model, c)), axis=-1)
            else:
                raise DomainError(f"unknown moment quantity {quantity!r}")
        out[start:start + chunk] = val**Q
    return out


def volume_ladder_models(model: Model, sizes: Sequence[int]) -> List[Model]:
    """Periodic boxes [0, L-1]^d for each L."""
    d = model.geometry.dimension
    return [model.with_box([(0, L - 1)] * d, "periodic") for L in sizes]


def moment_suite(models: Sequence[Model], samples: Sequence[np.ndarray], Q_list: Sequence[float] = (2.0,),
                 alpha_list: Sequence[float] = (0.25,), threshold: float = config.Z_THRESHOLD
                 ) -> Tuple[List[MomentRow], List[TestVerdict]]:
    """Moment table per volume and site, plus the bounded-across-the-ladder verdicts.

    A quantity passes when every volume's max-over-sites mean stays below
    (1 + 3 * max relative SE) times the running max of the smaller volumes.
    """
    if len(models) != len(samples):
        raise DomainError("need one sample set per volume")
    for Q in Q_list:
        if Q < 1:
            raise DomainError(f"Q must be >= 1, got {Q}")
    for a in alpha_list:
        if not 0 <= a < 0.5:
            raise DomainError(f"alpha must lie in [0, 1/2), got {a}")
    sizes = [m.n_sites for m in models]
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise DomainError("volumes must be nested (non-decreasing)")

    combos = []
    for Q in Q_list:
        for a in alpha_list:
            combos += [(HOELDER_MOMENT, Q, a), (SOBOLEV_MOMENT, Q, a)]
        combos += [(COERCIVE_MOMENT, Q, None), (DRIFT_MOMENT, Q, None)]

    rows, verdicts = [], []
    for quantity, Q, alpha in combos:
        maxima, rel = [], []
        for model, s in zip(models, samples):
            series = site_moment_series(model, s, quantity, Q, alpha)
            _require_data(series.mean(axis=1), f"moments {quantity} volume {model.n_sites}")
            stats = [batch_means(series[:, k]) for k in range(model.n_sites)]
            for k, (mean, se) in enumerate(stats):
                rows.append(MomentRow(volume=model.geometry.shape[0], n_sites=model.n_sites, quantity=quantity,
                                      Q=Q, alpha=alpha, site=site_key(model.sites[k]), mean=mean, se=se))
            k_max = int(np.argmax([m for m, _ in stats]))
            mean, se = stats[k_max]
            maxima.append(mean)
            rel.append(se / abs(mean) if mean else 0.0)

        bound = 1.0 + 3.0 * max(rel)
        ratio = 1.0
        for i in range(1, len(maxima)):
            running = max(maxima[:i])
            if running > 0:
                ratio = max(ratio, maxima[i] / running)
            elif maxima[i] > 0:
                ratio = math.inf
        label = f"{quantity}(Q={Q:g}" + (f",alpha={alpha:g})" if alpha is not None else ")")
        verdicts.append(TestVerdict(
            test="moments", equation="sup over the volume ladder of E|.|^Q is bounded",
            statistic=ratio, se=max(rel), z=(ratio - 1.0) / max(rel) if max(rel) > 0 else 0.0,
            threshold=threshold, passed=bool(ratio <= bound), n=int(min(len(s) for s in samples)),
            kind=UPPER_BOUND, bound=bound, model_hash=models[-1].hash,
            metadata={"quantity": label, "volumes": sizes, "max_over_sites": maxima,
                      "note": "finite volume ladder"},
        ))
    logger.info("moment suite", extra={"volumes": sizes, "failed": sum(not v.passed for v in verdicts)})
    return rows, verdicts


# ---------------------------------------------------------
# Hoelder / Kolmogorov scaling
# ---------------------------------------------------------
class HolderFit(BaseModel):
    Q: int
    slope: float
    slope_se: float
    intercept: float
    margin: float
    rhos: List[float]
    moments: List[float]
    moment_se: List[float]


def increment_moment_series(model: Model, samples: np.ndarray, site, rho: float, Q: int,
                            n_base: int = 8) -> np.ndarray:
    """Per-sample mean over base points tau of (omega(tau) - omega(tau + rho))^{2Q}."""
    site = (site,) if isinstance(site, int) else tuple(site)
    i = model.site_index[site]
    n = mode_indices(model.n_modes)
    base = np.arange(n_base) * model.params.beta / n_base
    delta = eigenfunction(n, base[:, None], model.params) - eigenfunction(n, base[:, None] + rho, model.params)
    inc = np.asarray(samples, dtype=float)[:, i, :] @ delta.T
    return np.mean(inc ** (2 * int(Q)), axis=-1)


def fit_loglog(rhos: Sequence[float], moments: Sequence[float], ses: Sequence[float]) -> Tuple[float, float, float]:
    """Weighted least squares of log moment against log rho: (slope, slope SE, intercept)."""
    x = np.log(np.asarray(rhos, dtype=float))
    m = np.asarray(moments, dtype=float)
    if np.any(m <= 0):
        raise DomainError("moments must be positive for a log-log fit")
    y = np.log(m)
    rel = np.asarray(ses, dtype=float) / m
    w = 1.0 / rel**2 if np.all(rel > 0) else np.ones_like(x)
    X = np.stack([np.ones_like(x), x], axis=1)
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    coef = cov @ (XtW @ y)
    if not np.all(rel > 0):
        resid = y - X @ coef
        dof = max(1, x.size - 2)
        cov = cov * float(np.sum(resid**2)) / dof
    return float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0))), float(coef[0])


def _default_rhos(model: Model, n: int = 10) -> np.ndarray:
    lo, hi = model.spec.verification.holder_rho
    return np.geomspace(lo, hi, n) * model.params.beta


def _is_bridge(model: Model) -> bool:
    return not model.coupling.is_active and all(
        isinstance(p, PolynomialPotential) and p.degree == 0 for p in model.potentials
    )


def holder_scaling(model: Model, samples: np.ndarray, Q_list: Sequence[int] = (1, 2),
                   rhos: Optional[Sequence[float]] = None, site=None, seed: Optional[int] = None
                   ) -> Tuple[List[HolderFit], List[TestVerdict]]:
    """Slope of log E[(omega(tau) - omega(tau'))^{2Q}] against log rho; passes when slope >= Q - margin."""
    rhos = _default_rhos(model) if rhos is None else np.asarray(rhos, dtype=float)
    if np.any(rhos <= 0) or np.any(rhos > 0.5 * model.params.beta):
        raise DomainError("rho values must lie in (0, beta/2]")
    if math.log10(rhos.max() / rhos.min()) < 1.5 - 1e-9:
        raise DomainError(f"rho range [{rhos.min():g}, {rhos.max():g}] spans less than 1.5 decades")
    site = model.sites[0] if site is None else site
    for Q in Q_list:
        if Q not in (1, 2):
            raise DomainError(f"Q must be 1 or 2, got {Q}")

    p = model.params
    lipschitz = {GREEN_SERIES: green_lipschitz_constant(p, GREEN_SERIES),
                 GREEN_CLOSED_FORM: green_lipschitz_constant(p, GREEN_CLOSED_FORM)}
    fits, verdicts = [], []
    for Q in Q_list:
        series = [increment_moment_series(model, samples, site, r, Q) for r in rhos]
        _require_data(series[-1], f"holder Q={Q}")
        stats = [batch_means(s) for s in series]
        moments = [m for m, _ in stats]
        ses = [s for _, s in stats]
        slope, slope_se, intercept = fit_loglog(rhos, moments, ses)
        margin = max(1.96 * slope_se, 0.1 * Q)
        fits.append(HolderFit(Q=Q, slope=slope, slope_se=slope_se, intercept=intercept, margin=margin,
                              rhos=rhos.tolist(), moments=moments, moment_se=ses))
        verdicts.append(TestVerdict(
            test="holder", equation="E|omega(tau) - omega(tau')|^{2Q} <= C rho^Q",
            statistic=slope, se=slope_se, z=(slope - Q) / slope_se if slope_se > 0 else 0.0,
            passed=bool(slope >= Q - margin), n=int(series[0].size), kind=LOWER_BOUND, bound=Q - margin,
            seed=seed, model_hash=model.hash,
            metadata={"Q": Q, "lipschitz_green": lipschitz, "rho_decades": math.log10(rhos.max() / rhos.min())},
        ))
        if _is_bridge(model):
            exact = structure_function(p, rhos[-1], model.n_modes, Q)
            verdicts.append(_z_verdict(
                "holder-wick", "E(d omega)^{2Q} = (2Q-1)!! S^Q", series[-1] - exact, model, seed=seed,
                Q=Q, rho=float(rhos[-1]), exact=float(exact),
            ))
    return fits, verdicts


# ---------------------------------------------------------
# Condition constants
# ---------------------------------------------------------
class ConditionConstants(BaseModel):
    Q: float
    Xi_Q: float
    Theta0: float
    Theta0_prime: float
    K3_threshold: float
    K3_threshold_moment: float
    trace_inv: float
    K1: float
    K2: float
    K3: Optional[float] = None
    J_norm0: float
    J_triple: float
    M1: float
    M2: float
    flags: Dict[str, bool] = Field(default_factory=dict)


def fitted_constants(model: Model) -> Dict[str, Optional[float]]:
    """Worst case of K_1, K_2, K_3 over the distinct one-site potentials."""
    R = model.coupling.R if model.coupling.is_active else 2.0
    q_range = model.spec.verification.assumption_range
    out: Dict[str, Optional[float]] = {"1": 0.0, "2": 0.0, "3": 0.0}
    for pot, _ in model.potential_groups:
        report = check_V_assumptions(pot, q_range=q_range, R=R)
        for key, name in (("1", "i"), ("2", "ii"), ("3", "iii")):
            K = report.constant(name)
            out[key] = None if K is None or out[key] is None else max(out[key], K)
    return out


def condition_constants(model: Model, Q: float = 2.0, constants: Optional[Dict[str, Optional[float]]] = None,
                        M1: Optional[float] = None) -> ConditionConstants:
    """Xi_{Q-1}, Theta_0, Theta_0' and both K_3 thresholds from fitted constants and the coupling seminorms.

    M_2 = 3 * 2^R bounds the pair profile growth; M_1 weighs the Gaussian trace term and defaults to M_2.
    """
    if Q < 1:
        raise DomainError(f"Q must be >= 1, got {Q}")
    constants = fitted_constants(model) if constants is None else constants
    K1, K2, K3 = constants.get("1"), constants.get("2"), constants.get("3")
    if K1 is None or K2 is None:
        raise DependencyError("coercivity constants K_1, K_2 were not fitted (inequalities (i)/(ii) infeasible)")
    c, d = model.coupling, model.geometry.dimension
    J0 = triple_seminorm(c, 0.0, d) / 2.0
    J_triple = triple_seminorm(c, 0.0, d)
    if J_triple > 0 and K3 is None:
        raise DependencyError("coupled model needs K_3 from inequality (iii)")

    p = model.params
    trace = p.beta * float(green(0.0, 0.0, p, GREEN_EXACT))
    xi = K1 * (1.0 + (Q - 1.0) * K2) * trace
    M2 = 3.0 * 2.0 ** c.R
    M1 = M2 if M1 is None else float(M1)
    if M1 < 0:
        raise DomainError(f"M1 must be nonnegative, got {M1}")
    if J_triple == 0:
        theta0 = theta0p = 0.0
    else:
        theta0 = math.inf if K1 * trace >= 1 else J_triple * K3 * (M2 + M1 * trace) / (1.0 - K1 * trace)
        theta0p = K3 * M2 * J_triple
    thr, thr_m = k3_threshold(c, d), k3_threshold_moment(c, d)
    flags = {"Xi<1": xi < 1, "Theta0<1": theta0 < 1, "Theta0_prime<1": theta0p < 1}
    if K3 is not None:
        flags["K3<=threshold"] = K3 <= thr
        flags["K3<=threshold_moment"] = K3 <= thr_m
    return ConditionConstants(
        Q=Q, Xi_Q=xi, Theta0=theta0, Theta0_prime=theta0p, K3_threshold=thr, K3_threshold_moment=thr_m,
        trace_inv=trace, K1=K1, K2=K2, K3=K3, J_norm0=J0, J_triple=J_triple, M1=M1, M2=M2, flags=flags,
    )


def conditions_verdicts(model: Model, Q_list: Sequence[float] = (1.0, 2.0, 3.0)) -> Tuple[List[ConditionConstants], List[TestVerdict]]:
    """Finite constants and Xi affine and nondecreasing in Q; the <1 flags ride along as metadata."""
    table = [condition_constants(model, Q) for Q in sorted(Q_list)]
    verdicts = []
    for cc in table:
        finite = all(math.isfinite(v) for v in (cc.Xi_Q, cc.Theta0, cc.Theta0_prime, cc.trace_inv))
        verdicts.append(TestVerdict(
            test="conditions", equation="Xi, Theta0, Theta0' finite", statistic=float(finite), se=0.0, z=0.0,
            passed=finite, n=1, kind=PROPERTY, model_hash=model.hash,
            metadata={"Q": cc.Q, "flags": cc.flags, "K3_threshold": cc.K3_threshold,
                      "K3_threshold_moment": cc.K3_threshold_moment},
        ))
    if len(table) >= 3:
        qs = np.array([cc.Q for cc in table])
        xs = np.array([cc.Xi_Q for cc in table])
        slope = (xs[-1] - xs[0]) / (qs[-1] - qs[0])
        dev = float(np.max(np.abs(xs - (xs[0] + slope * (qs - qs[0])))))
        scale = max(1.0, float(np.max(np.abs(xs))))
        verdicts.append(TestVerdict(
            test="conditions", equation="Xi_{Q-1} affine and nondecreasing in Q", statistic=dev / scale,
            se=0.0, z=0.0, passed=bool(dev <= 1e-12 * scale and slope >= 0), n=len(table), kind=UPPER_BOUND,
            bound=1e-12, model_hash=model.hash, metadata={"slope": float(slope)},
        ))
    return table, verdicts


# ---------------------------------------------------------
# Temperedness
# ---------------------------------------------------------
class TemperednessEntry(BaseModel):
    weight: str
    rate: float
    submultiplicativity: float
    boundary_norm: float
    sample_norm_mean: Optional[float] = None
    sample_norm_max: Optional[float] = None


def temperedness_report(model: Model, samples: Optional[np.ndarray] = None,
                        weights: Sequence[WeightSystem] = (WeightSystem(POLYNOMIAL, 1.0), WeightSystem(EXPONENTIAL, 0.5)),
                        r: float = 2.0) -> List[TemperednessEntry]:
    """Weighted lattice norms of the frozen boundary and of sampled configurations."""
    out = []
    b_values = model.boundary_coeffs @ model.phi.T
    for ws in weights:
        entry = TemperednessEntry(
            weight=ws.kind, rate=ws.rate, submultiplicativity=ws.submultiplicativity(model.geometry.dimension),
            boundary_norm=float(ws.lattice_norm(b_values, model.boundary_sites, model.grid, r)),
        )
        if samples is not None and len(samples):
            norms = ws.lattice_norm(model.values(np.asarray(samples)), model.sites, model.grid, r)
            entry.sample_norm_mean = float(np.mean(norms))
            entry.sample_norm_max = float(np.max(norms))
        out.append(entry)
    return out

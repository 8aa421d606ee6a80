"""
Finite-volume Gibbs kernels on loop space.

The ground-truth measure is the mode-truncated, grid-quadrature density
exp(log_density) on coefficient space; every logarithmic derivative, cocycle
and sampler below is derived from it.
"""

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

import config
from errors import ConfigurationError, DomainError, InsufficientDataError, StepSizeError
from interaction import (
    LatticeState,
    Model,
    action_batch,
    action_from_values,
    drift_field,
)
from loop_core import bridge_scales, eigenfunction, mode_indices, yosida

logger = logging.getLogger(__name__)


# ---------------------------------------------------------
# Directions
# ---------------------------------------------------------
@dataclass(frozen=True)
class ShiftDirection:
    """h_i = e_k (x) phi_n scaled by theta."""

    site: Tuple[int, ...]
    mode: int
    theta: float = 1.0

    def __post_init__(self):
        site = (self.site,) if isinstance(self.site, (int, np.integer)) else tuple(self.site)
        object.__setattr__(self, "site", tuple(int(x) for x in site))

    @property
    def label(self) -> str:
        return f"site={','.join(map(str, self.site))} n={self.mode}"


@dataclass(frozen=True, eq=False)
class CoefficientDirection:
    """e_k (x) h for an arbitrary loop h given by its coefficients."""

    site: Tuple[int, ...]
    coeffs: np.ndarray
    theta: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        site = (self.site,) if isinstance(self.site, (int, np.integer)) else tuple(self.site)
        object.__setattr__(self, "site", tuple(int(x) for x in site))
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))

    @property
    def label(self) -> str:
        return f"site={','.join(map(str, self.site))} {self.name}"


Direction = Union[ShiftDirection, CoefficientDirection]


def direction_array(model: Model, direction: Direction) -> np.ndarray:
    """Unit (theta-free) direction as an array (n_sites, 2N+1)."""
    if direction.site not in model.site_index:
        raise DomainError(f"direction site {direction.site} is outside the volume {model.geometry.box}")
    h = np.zeros((model.n_sites, model.n_coeffs))
    i = model.site_index[direction.site]
    if isinstance(direction, ShiftDirection):
        if abs(direction.mode) > model.n_modes:
            raise DomainError(f"mode {direction.mode} outside |n| <= {model.n_modes}")
        h[i, direction.mode + model.n_modes] = 1.0
    else:
        if direction.coeffs.size != model.n_coeffs:
            raise DomainError(f"direction has {direction.coeffs.size} coefficients, model uses {model.n_coeffs}")
        h[i] = direction.coeffs
    return h


def smoothed_direction(model: Model, site, tau: float, K: float) -> CoefficientDirection:
    """e_k (x) phi_tau^(K), the Yosida-smoothed Green function at tau."""
    loop = yosida(tau, K, model.params, model.n_modes)
    return CoefficientDirection(site, loop.coeffs, name=f"yosida(tau={tau:g},K={K:g})")


# ---------------------------------------------------------
# Densities, derivatives, cocycles
# ---------------------------------------------------------
def log_density_batch(model: Model, coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    quad = 0.5 * np.sum(model.lam * coeffs**2, axis=(-2, -1))
    return -quad - action_batch(model, coeffs)


def log_density(model: Model, state: LatticeState) -> float:
    model.check_state(state)
    return float(log_density_batch(model, state.coeffs))


def log_density_gradient(model: Model, coeffs: np.ndarray) -> np.ndarray:
    """d log_density / d c_{k,n} = -lambda_n c_{k,n} - (F_k, phi_n) for (..., n_sites, 2N+1)."""
    coeffs = np.asarray(coeffs, dtype=float)
    return -model.lam * coeffs - model.weight * (drift_field(model, coeffs) @ model.phi)


def logderiv_b(model: Model, state: LatticeState, direction: Direction) -> float:
    model.check_state(state)
    h = direction_array(model, direction)
    return float(np.sum(log_density_gradient(model, state.coeffs) * h))


def logderiv_along(model: Model, coeffs: np.ndarray, direction: Direction) -> np.ndarray:
    """b_h for a batch of coefficient arrays (..., n_sites, 2N+1)."""
    h = direction_array(model, direction)
    return np.sum(log_density_gradient(model, coeffs) * h, axis=(-2, -1))


def cocycle_factors(model: Model, state: LatticeState, direction: Direction) -> Dict[str, float]:
    """log a = log a^A + log a^V + log a^W for the shift by theta*h."""
    model.check_state(state)
    h = direction.theta * direction_array(model, direction)
    c = state.coeffs
    log_A = -float(np.sum(model.lam * c * h)) - 0.5 * float(np.sum(model.lam * h * h))

    i = model.site_index[direction.site]
    pot = model.potentials[i]
    v = c[i] @ model.phi.T
    psi = h[i] @ model.phi.T
    log_V = -model.weight * float(np.sum(pot.eval(v + psi, 0) - pot.eval(v, 0)))

    log_W = 0.0
    if model.nbr_idx.shape[1]:
        # bonds of site i, frozen boundary loops and periodic images included
        nb = model.extended_values(model.values(c))[model.nbr_idx[i]]
        w = model.coupling.profile
        bonds = model.nbr_J[i][:, None] * (w.eval(v + psi - nb, 0) - w.eval(v - nb, 0))
        log_W = -model.weight * float(np.sum(bonds))
    return {"A": log_A, "V": log_V, "W": log_W}


def rn_cocycle(model: Model, state: LatticeState, direction: Direction, log: bool = False) -> float:
    """a_{theta h}(omega) = rho(omega + theta h) / rho(omega)."""
    total = sum(cocycle_factors(model, state, direction).values())
    if log:
        return total
    with np.errstate(over="ignore"):
        return float(np.exp(total))


def log_cocycle_batch(model: Model, coeffs: np.ndarray, direction: Direction) -> np.ndarray:
    h = direction.theta * direction_array(model, direction)
    return log_density_batch(model, coeffs + h) - log_density_batch(model, coeffs)


# ---------------------------------------------------------
# Chain configuration
# ---------------------------------------------------------
PCN = "pcn"
LANGEVIN = "langevin"


class ChainConfig(BaseModel):
    sampler: Literal["pcn", "langevin"] = PCN
    step: float = Field(0.5, gt=0, le=1, description="pCN step s")
    dt: float = Field(0.01, gt=0, description="Langevin time step")
    n_sweeps: int = Field(10_000, ge=1)
    burn_in: int = Field(1_000, ge=0)
    thin: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    adapt_step: bool = True
    random_scan: bool = False
    noise: bool = True

    @model_validator(mode="after")
    def _check_burn_in(self):
        if self.burn_in >= self.n_sweeps:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than n_sweeps ({self.n_sweeps})")
        return self


@dataclass
class SweepStats:
    accepted: np.ndarray
    proposed: np.ndarray

    @property
    def rate(self) -> float:
        total = float(np.sum(self.proposed))
        return float(np.sum(self.accepted)) / total if total else 1.0


# ---------------------------------------------------------
# pCN Metropolis
# ---------------------------------------------------------
class _Workspace:
    """Mutable coefficients and extended grid values owned by one chain."""

    def __init__(self, model: Model, coeffs: np.ndarray):
        self.model = model
        self.coeffs = np.array(coeffs, dtype=float)
        self.ext = model.extended_values(model.values(self.coeffs))
        self.scales = bridge_scales(model.params, model.n_modes)

    def local_delta(self, i: int, new_values: np.ndarray) -> float:
        m = self.model
        old = self.ext[i]
        pot = m.potentials[i]
        delta = np.sum(pot.eval(new_values, 0) - pot.eval(old, 0))
        if m.nbr_idx.shape[1]:
            nb = self.ext[m.nbr_idx[i]]
            w = m.coupling.profile
            delta += np.sum(m.nbr_J[i][:, None] * (w.eval(new_values - nb, 0) - w.eval(old - nb, 0)))
        return m.weight * float(delta)

    def pcn_update(self, i: int, s: float, rng: np.random.Generator) -> bool:
        fresh = self.scales * rng.standard_normal(self.scales.size)
        proposal = math.sqrt(1.0 - s * s) * self.coeffs[i] + s * fresh
        new_values = proposal @ self.model.phi.T
        delta = self.local_delta(i, new_values)
        if rng.random() < math.exp(min(0.0, -delta)):
            self.coeffs[i] = proposal
            self.ext[i] = new_values
            return True
        return False

    def pcn_sweep(self, s: float, rng: np.random.Generator, order: Sequence[int]) -> np.ndarray:
        accepted = np.zeros(self.model.n_sites)
        for i in order:
            accepted[i] += self.pcn_update(i, s, rng)
        return accepted

    def langevin_step(self, dt: float, rng: np.random.Generator, noise: bool = True):
        m = self.model
        decay, std = ou_step_parameters(m.lam, dt)
        c = self.coeffs
        c = decay * c + (std * rng.standard_normal(c.shape) if noise else 0.0)
        grad = m.weight * (drift_field(m, c) @ m.phi)
        if not np.all(np.isfinite(grad)):
            raise StepSizeError(f"non-finite drift at dt={dt}; reduce the step size")
        c = c - 0.5 * dt * grad
        c = decay * c + (std * rng.standard_normal(c.shape) if noise else 0.0)
        self.coeffs = c
        self.ext = m.extended_values(m.values(c))


def _sweep_order(model: Model, cfg: ChainConfig, rng: np.random.Generator, sites=None):
    order = np.arange(model.n_sites) if sites is None else np.asarray(sites, dtype=int)
    if cfg.random_scan:
        order = rng.permutation(order)
    return order


def pcn_sweep(model: Model, state: LatticeState, cfg: ChainConfig, rng: np.random.Generator,
              sites: Optional[Sequence[int]] = None) -> Tuple[LatticeState, SweepStats]:
    """One pCN Metropolis pass over the sites (all of Lambda unless sites is given)."""
    if cfg.sampler != PCN:
        raise ConfigurationError("pcn_sweep needs sampler='pcn'")
    model.check_state(state)
    ws = _Workspace(model, state.coeffs)
    order = _sweep_order(model, cfg, rng, sites)
    accepted = ws.pcn_sweep(cfg.step, rng, order)
    proposed = np.zeros(model.n_sites)
    proposed[order] = 1.0
    return state.with_coeffs(ws.coeffs), SweepStats(accepted, proposed)


def resample_block(model: Model, coeffs: np.ndarray, sites: Sequence[int], n_sweeps: int, step: float,
                   rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Run n_sweeps pCN passes over the given site indices only; the rest stays frozen.

    Returns the new coefficients and the acceptance rate of the block moves.
    """
    ws = _Workspace(model, coeffs)
    order = np.asarray(sites, dtype=int)
    accepted = 0.0
    for _ in range(n_sweeps):
        accepted += float(np.sum(ws.pcn_sweep(step, rng, order)))
    return ws.coeffs, accepted / max(1, n_sweeps * order.size)


def pcn_log_transition(model: Model, state: LatticeState, proposal: LatticeState, site, s: float) -> float:
    """log[q(omega -> omega') alpha(omega -> omega')] for a single-site pCN move."""
    i = model.site_index[tuple(site) if not isinstance(site, int) else (site,)]
    c, c_new = state.coeffs[i], proposal.coeffs[i]
    if not np.allclose(np.delete(state.coeffs, i, 0), np.delete(proposal.coeffs, i, 0)):
        raise DomainError("pCN moves change one site only")
    rho = math.sqrt(1.0 - s * s)
    lam = model.lam
    log_q = float(np.sum(0.5 * np.log(lam / (2 * np.pi * s * s)) - lam * (c_new - rho * c) ** 2 / (2 * s * s)))
    delta = float(action_batch(model, proposal.coeffs) - action_batch(model, state.coeffs))
    return log_q + min(0.0, -delta)


# ---------------------------------------------------------
# Langevin (Strang splitting with exact OU flow)
# ---------------------------------------------------------
def ou_step_parameters(lam, dt: float):
    """Mean factor and noise std of one OU half step of dc = -(lam/2) c dt + dW over time dt/2."""
    lam = np.asarray(lam, dtype=float)
    decay = np.exp(-0.25 * lam * dt)
    std = np.sqrt(-np.expm1(-0.5 * lam * dt) / lam)
    return decay, std


def langevin_sweep(model: Model, state: LatticeState, cfg: ChainConfig, rng: np.random.Generator) -> LatticeState:
    if cfg.sampler != LANGEVIN:
        raise ConfigurationError("langevin_sweep needs sampler='langevin'")
    model.check_state(state)
    ws = _Workspace(model, state.coeffs)
    ws.langevin_step(cfg.dt, rng, cfg.noise)
    return state.with_coeffs(ws.coeffs)


# ---------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------
def batch_means(x: np.ndarray, n_batches: int = config.N_BATCHES) -> Tuple[float, float]:
    """Mean and batch-means standard error."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    if n == 0:
        return math.nan, math.nan
    n_batches = min(n_batches, n)
    size = n // n_batches
    if n_batches < 2:
        return float(np.mean(x)), math.inf
    batches = x[: n_batches * size].reshape(n_batches, size).mean(axis=1)
    se = math.sqrt(float(np.var(batches, ddof=1)) / n_batches)
    return float(np.mean(x)), se


def integrated_autocorr_time(x: np.ndarray, window_c: float = 5.0) -> float:
    """FFT autocorrelation summed up to the first lag m with m >= c * tau(m)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    if n < 2:
        return 1.0
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, n=size)
    acf = np.fft.irfft(f * np.conj(f), n=size)[:n]
    if acf[0] <= 0:
        return 1.0
    acf /= acf[0]
    taus = 2.0 * np.cumsum(acf) - 1.0
    lags = np.arange(n)
    ok = lags >= window_c * taus
    m = int(np.argmax(ok)) if np.any(ok) else n - 1
    return float(max(taus[m], 1.0))


def effective_sample_size(x: np.ndarray) -> float:
    x = np.asarray(x).reshape(-1)
    return x.size / integrated_autocorr_time(x)


# ---------------------------------------------------------
# Chains
# ---------------------------------------------------------
class ObservableSummary(BaseModel):
    mean: float
    se: float
    iat: float
    ess: float


class ChainReport(BaseModel):
    model_hash: str
    version: str
    seed: int
    sampler: str
    n_sweeps: int
    burn_in: int
    thin: int
    n_kept: int
    step_final: Optional[float] = None
    dt: Optional[float] = None
    acceptance_rate: Optional[float] = None
    acceptance_per_site: List[float] = Field(default_factory=list)
    observables: Dict[str, ObservableSummary] = Field(default_factory=dict)
    checkpoints: List[int] = Field(default_factory=list)


@dataclass
class Checkpoint:
    sweep: int
    coeffs: np.ndarray
    rng_state: dict
    step: float
    accepted: np.ndarray
    proposed: np.ndarray
    window_accepted: float = 0.0
    window_proposed: float = 0.0
    checkpoints: List[int] = field(default_factory=list)

    def blob(self) -> bytes:
        return json.dumps({
            "rng_state": self.rng_state,
            "step": self.step,
            "accepted": self.accepted.tolist(),
            "proposed": self.proposed.tolist(),
            "window_accepted": self.window_accepted,
            "window_proposed": self.window_proposed,
            "checkpoints": self.checkpoints,
        }, sort_keys=True).encode("utf-8")


@dataclass
class ChainResult:
    report: ChainReport
    sweeps: np.ndarray
    samples: np.ndarray
    checkpoint: Checkpoint


def chain_observables(model: Model, samples: np.ndarray) -> Dict[str, np.ndarray]:
    """Per-sample scalar series used in chain reports."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] == 0:
        return {}
    phi0 = eigenfunction(mode_indices(model.n_modes), 0.0, model.params)
    at0 = samples @ phi0
    energies = np.concatenate([action_batch(model, chunk) for chunk in np.array_split(samples, max(1, samples.shape[0] // 4096))])
    return {
        "c0_mean": samples[:, :, model.n_modes].mean(axis=1),
        "omega0_sq_mean": (at0**2).mean(axis=1),
        "action": energies,
    }


def summarize_series(x: np.ndarray) -> ObservableSummary:
    mean, se = batch_means(x)
    iat = integrated_autocorr_time(x)
    return ObservableSummary(mean=mean, se=se, iat=iat, ess=np.asarray(x).size / iat)


def run_chain(model: Model, cfg: ChainConfig, initial: Optional[np.ndarray] = None,
              resume: Optional[Checkpoint] = None, previous_samples: Optional[np.ndarray] = None,
              sample_sink: Optional[Callable[[int, np.ndarray], None]] = None,
              checkpoint_sink: Optional[Callable[[Checkpoint], None]] = None,
              progress: bool = False, version: str = "") -> ChainResult:
    """Run burn-in and sampling; thinned samples are kept and streamed to sample_sink.

    With resume the chain continues bit-identically from the checkpoint; pass the
    samples kept before it as previous_samples so the report covers the whole run.
    """
    rng = np.random.default_rng(cfg.seed)
    n_sites = model.n_sites

    if resume is not None:
        start = resume.sweep
        ws = _Workspace(model, resume.coeffs)
        rng.bit_generator.state = resume.rng_state
        step = resume.step
        accepted, proposed = resume.accepted.copy(), resume.proposed.copy()
        win_acc, win_prop = resume.window_accepted, resume.window_proposed
        checkpoints = list(resume.checkpoints)
    else:
        start = 0
        coeffs = np.zeros((n_sites, model.n_coeffs)) if initial is None else initial
        ws = _Workspace(model, coeffs)
        step = cfg.step
        accepted, proposed = np.zeros(n_sites), np.zeros(n_sites)
        win_acc = win_prop = 0.0
        checkpoints = []

    logger.info("chain start", extra={"model_hash": model.hash, "sampler": cfg.sampler, "seed": cfg.seed,
                                      "start_sweep": start, "n_sweeps": cfg.n_sweeps})
    t0 = time.perf_counter()
    kept_sweeps, kept = [], []

    def make_checkpoint(sweep: int) -> Checkpoint:
        return Checkpoint(sweep, ws.coeffs.copy(), rng.bit_generator.state, step, accepted.copy(),
                          proposed.copy(), win_acc, win_prop, list(checkpoints))

    for t in tqdm(range(start, cfg.n_sweeps), disable=not progress, file=sys.stderr,
                  desc=f"{cfg.sampler} {model.hash[:8]}", initial=start, total=cfg.n_sweeps):
        if cfg.sampler == PCN:
            order = _sweep_order(model, cfg, rng)
            acc = ws.pcn_sweep(step, rng, order)
            if t < cfg.burn_in:
                win_acc += float(np.sum(acc))
                win_prop += float(len(order))
                if cfg.adapt_step and (t + 1) % config.PCN_ADAPT_EVERY == 0:
                    rate = win_acc / win_prop
                    lo, hi = config.PCN_TARGET_ACCEPTANCE
                    if rate < lo:
                        step *= 0.8
                    elif rate > hi:
                        step = min(1.0, step * 1.25)
                    win_acc = win_prop = 0.0
                    logger.debug("pcn step adapted", extra={"sweep": t + 1, "rate": rate, "step": step})
            else:
                accepted += acc
                proposed[order] += 1.0
        else:
            ws.langevin_step(cfg.dt, rng, cfg.noise)

        if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0:
            snapshot = ws.coeffs.copy()
            kept_sweeps.append(t)
            kept.append(snapshot)
            if sample_sink is not None:
                sample_sink(t, snapshot)

        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            checkpoints.append(t + 1)
            if checkpoint_sink is not None:
                checkpoint_sink(make_checkpoint(t + 1))

    if not checkpoints or checkpoints[-1] != cfg.n_sweeps:
        checkpoints.append(cfg.n_sweeps)
    final = make_checkpoint(cfg.n_sweeps)
    if checkpoint_sink is not None:
        checkpoint_sink(final)

    samples = np.array(kept).reshape(-1, n_sites, model.n_coeffs)
    sweeps = np.array(kept_sweeps, dtype=np.uint64)
    all_samples = samples if previous_samples is None else np.concatenate([previous_samples, samples])

    report = ChainReport(
        model_hash=model.hash, version=version, seed=cfg.seed, sampler=cfg.sampler,
        n_sweeps=cfg.n_sweeps, burn_in=cfg.burn_in, thin=cfg.thin, n_kept=int(all_samples.shape[0]),
        checkpoints=checkpoints,
    )
    if cfg.sampler == PCN:
        report.step_final = step
        report.acceptance_rate = float(np.sum(accepted) / max(np.sum(proposed), 1.0))
        report.acceptance_per_site = (accepted / np.maximum(proposed, 1.0)).tolist()
    else:
        report.dt = cfg.dt
    report.observables = {k: summarize_series(v) for k, v in chain_observables(model, all_samples).items()}

    logger.info("chain done", extra={
        "model_hash": model.hash, "n_kept": report.n_kept, "acceptance": report.acceptance_rate,
        "seconds": round(time.perf_counter() - t0, 3),
        "rss_mb": round(psutil.Process().memory_info().rss / 2**20, 1),
    })
    return ChainResult(report, sweeps, samples, final)


# ---------------------------------------------------------
# Sample stream and checkpoints
# ---------------------------------------------------------
def record_dtype(n_sites: int, n_coeffs: int) -> np.dtype:
    return np.dtype([("sweep", "<u8"), ("coeffs", "<f8", (n_sites * n_coeffs,))])


class SampleWriter:
    """Appends binary records (u64 sweep, little-endian f64 coefficients in site order)."""

    def __init__(self, path, n_sites: int, n_coeffs: int, append: bool = False):
        self.path = Path(path)
        self.dtype = record_dtype(n_sites, n_coeffs)
        self._fh = open(self.path, "ab" if append else "wb")

    def __call__(self, sweep: int, coeffs: np.ndarray):
        rec = np.zeros(1, dtype=self.dtype)
        rec["sweep"] = sweep
        rec["coeffs"] = np.asarray(coeffs, dtype="<f8").reshape(-1)
        self._fh.write(rec.tobytes())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_samples(path, n_sites: int, n_coeffs: int) -> Tuple[np.ndarray, np.ndarray]:
    dtype = record_dtype(n_sites, n_coeffs)
    raw = Path(path).read_bytes()
    if len(raw) % dtype.itemsize:
        raise ConfigurationError(f"{path}: size {len(raw)} is not a multiple of the record size {dtype.itemsize}")
    recs = np.frombuffer(raw, dtype=dtype)
    return recs["sweep"].astype(np.uint64), recs["coeffs"].reshape(-1, n_sites, n_coeffs).astype(float)


def truncate_samples(path, n_sites: int, n_coeffs: int, before_sweep: int):
    """Drop records at or after before_sweep (used when resuming)."""
    dtype = record_dtype(n_sites, n_coeffs)
    recs = np.frombuffer(Path(path).read_bytes(), dtype=dtype)
    Path(path).write_bytes(recs[recs["sweep"] < before_sweep].tobytes())


def write_checkpoint(path, ckpt: Checkpoint):
    n_sites, n_coeffs = ckpt.coeffs.shape
    rec = np.zeros(1, dtype=record_dtype(n_sites, n_coeffs))
    rec["sweep"] = ckpt.sweep
    rec["coeffs"] = ckpt.coeffs.reshape(-1)
    blob = ckpt.blob()
    with open(path, "wb") as f:
        f.write(rec.tobytes())
        f.write(np.array([len(blob)], dtype="<u8").tobytes())
        f.write(blob)


def read_checkpoint(path, n_sites: int, n_coeffs: int) -> Checkpoint:
    raw = Path(path).read_bytes()
    dtype = record_dtype(n_sites, n_coeffs)
    if len(raw) < dtype.itemsize + 8:
        raise ConfigurationError(f"{path} is not a checkpoint for {n_sites} sites x {n_coeffs} coefficients")
    rec = np.frombuffer(raw[: dtype.itemsize], dtype=dtype)[0]
    size = int(np.frombuffer(raw[dtype.itemsize: dtype.itemsize + 8], dtype="<u8")[0])
    meta = json.loads(raw[dtype.itemsize + 8: dtype.itemsize + 8 + size].decode("utf-8"))
    return Checkpoint(
        sweep=int(rec["sweep"]),
        coeffs=np.array(rec["coeffs"], dtype=float).reshape(n_sites, n_coeffs),
        rng_state=meta["rng_state"],
        step=meta["step"],
        accepted=np.asarray(meta["accepted"], dtype=float),
        proposed=np.asarray(meta["proposed"], dtype=float),
        window_accepted=meta["window_accepted"],
        window_proposed=meta["window_proposed"],
        checkpoints=list(meta["checkpoints"]),
    )


# ---------------------------------------------------------
# Matsubara functions
# ---------------------------------------------------------
@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    n: int


def matsubara_series(model: Model, samples: np.ndarray,
                     observables: Sequence[Tuple[object, Callable]], taus: Sequence[float]) -> np.ndarray:
    """Per-sample products A_0(omega_{k0}(tau_0)) ... A_n(omega_{kn}(tau_n))."""
    if len(observables) != len(taus):
        raise DomainError("need one time point per observable")
    taus = [float(t) for t in taus]
    if any(t < 0 or t > model.params.beta for t in taus):
        raise DomainError(f"time points must lie in [0, beta={model.params.beta}]")
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise DomainError(f"time points must be ordered, got {taus}")
    samples = np.asarray(samples, dtype=float)
    n = mode_indices(model.n_modes)
    out = np.ones(samples.shape[0])
    for (site, fn), tau in zip(observables, taus):
        site = (site,) if isinstance(site, (int, np.integer)) else tuple(site)
        if site not in model.site_index:
            raise DomainError(f"site {site} is outside the volume")
        vals = samples[:, model.site_index[site], :] @ eigenfunction(n, tau, model.params)
        out = out * np.asarray(fn(vals), dtype=float)
    return out


def matsubara(model: Model, samples: np.ndarray, observables, taus) -> Estimate:
    """Monte-Carlo estimate of the imaginary-time-ordered correlation with batch-means SE."""
    series = matsubara_series(model, samples, observables, taus)
    if series.size == 0:
        raise InsufficientDataError("no samples to estimate a Matsubara function from")
    if np.all(series == series[0]):
        return Estimate(float(series[0]), 0.0, series.size)
    mean, se = batch_means(series)
    return Estimate(mean, se, series.size)

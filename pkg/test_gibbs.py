"""
Tests for the finite-volume Gibbs kernels: log-density, logarithmic
derivatives, cocycles, the pCN and Langevin samplers, chains with
checkpoints, and Matsubara estimates.
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from errors import DomainError, InsufficientDataError, StepSizeError
from gibbs import (
    ChainConfig,
    CoefficientDirection,
    SampleWriter,
    ShiftDirection,
    batch_means,
    cocycle_factors,
    integrated_autocorr_time,
    langevin_sweep,
    log_cocycle_batch,
    log_density,
    log_density_batch,
    logderiv_along,
    logderiv_b,
    matsubara,
    ou_step_parameters,
    pcn_log_transition,
    pcn_sweep,
    read_checkpoint,
    read_samples,
    rn_cocycle,
    run_chain,
    smoothed_direction,
    truncate_samples,
    write_checkpoint,
)
from interaction import ModelSpec, action
from loop_core import green, sample_bridge, spectrum
from oracle import QuadratureSpec, quadrature_moments


def make_model(potential=(), coupling=None, box=((0, 0),), n_modes=2, boundary="zero"):
    return ModelSpec.model_validate({
        "name": "test",
        "potential": {"polynomial": list(potential)},
        "coupling": coupling or {"kind": "none"},
        "lattice": {"d": 1, "box": [list(b) for b in box], "boundary": {"mode": boundary}},
        "discretization": {"n_modes": n_modes},
    }).compile()


QUARTIC = (0.0, 0.0, 0.0, 1.0)
HARMONIC = {"kind": "harmonic_nn", "strength": 0.5}


def random_coeffs(model, rng, size=None, scale=1.0):
    shape = (model.n_sites, model.n_coeffs) if size is None else (size, model.n_sites, model.n_coeffs)
    return scale * rng.standard_normal(shape) / np.sqrt(model.lam)


@lru_cache(maxsize=None)
def quartic_chain():
    model = ModelSpec.load("quartic-single-site-N2").compile()
    result = run_chain(model, ChainConfig(n_sweeps=21_000, burn_in=1_000, seed=3))
    return model, result


# ---------------------------------------------------------
# TEST 1: Log-density and logarithmic derivatives
# ---------------------------------------------------------
def test_log_density_of_zero_state():
    model = make_model(QUARTIC, HARMONIC, box=((0, 2),))
    assert log_density(model, model.state()) == 0.0


def test_log_density_of_single_gaussian_mode():
    model = make_model()
    coeffs = np.zeros((1, model.n_coeffs))
    coeffs[0, model.n_modes + 1] = 0.8
    expected = -spectrum(1, model.params) * 0.8**2 / 2
    assert log_density(model, model.state(coeffs)) == pytest.approx(expected, rel=1e-14)


def test_log_density_decomposition():
    model = make_model(QUARTIC, HARMONIC, box=((0, 2),))
    state = model.state(random_coeffs(model, np.random.default_rng(1)))
    quad = 0.5 * float(np.sum(model.lam * state.coeffs**2))
    assert log_density(model, state) == pytest.approx(-quad - action(model, state), abs=1e-12)


def test_logderiv_of_gaussian():
    model = make_model()
    coeffs = np.zeros((1, model.n_coeffs))
    coeffs[0, model.n_modes - 2] = 1.0
    b = logderiv_b(model, model.state(coeffs), ShiftDirection((0,), -2))
    assert b == pytest.approx(-spectrum(-2, model.params))


def test_logderiv_vanishes_at_zero():
    model = make_model(QUARTIC)
    assert logderiv_b(model, model.state(), ShiftDirection(0, 0)) == 0.0


def test_logderiv_matches_finite_differences():
    model = make_model(QUARTIC, n_modes=4)
    c = random_coeffs(model, np.random.default_rng(2), scale=2.0)
    h = 1e-5
    for n in range(-4, 5):
        up, down = c.copy(), c.copy()
        up[0, n + 4] += h
        down[0, n + 4] -= h
        fd = (log_density_batch(model, up) - log_density_batch(model, down)) / (2 * h)
        assert logderiv_b(model, model.state(c), ShiftDirection(0, n)) == pytest.approx(float(fd), rel=1e-6)


def test_logderiv_is_linear_in_direction():
    model = make_model(QUARTIC, n_modes=4)
    c = random_coeffs(model, np.random.default_rng(6), size=10)
    direction = smoothed_direction(model, (0,), 0.3, 10.0)
    expected = sum(w * logderiv_along(model, c, ShiftDirection(0, n))
                   for n, w in zip(range(-4, 5), direction.coeffs))
    assert np.allclose(logderiv_along(model, c, direction), expected, rtol=1e-12, atol=1e-12)


def test_direction_outside_volume():
    model = make_model()
    with pytest.raises(DomainError):
        logderiv_b(model, model.state(), ShiftDirection(2, 0))
    with pytest.raises(DomainError):
        logderiv_b(model, model.state(), ShiftDirection(0, 5))


# ---------------------------------------------------------
# TEST 2: Radon-Nikodym cocycles
# ---------------------------------------------------------
def test_cocycle_at_zero_shift():
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    state = model.state(random_coeffs(model, np.random.default_rng(3)))
    assert rn_cocycle(model, state, ShiftDirection(0, 1, theta=0.0)) == 1.0


def test_gaussian_cocycle_closed_form():
    model = make_model()
    theta, c = 0.3, 0.7
    coeffs = np.zeros((1, model.n_coeffs))
    coeffs[0, model.n_modes + 1] = c
    lam = spectrum(1, model.params)
    value = rn_cocycle(model, model.state(coeffs), ShiftDirection(0, 1, theta))
    assert value == pytest.approx(math.exp(-theta * lam * c - theta**2 * lam / 2), rel=1e-12)
    factors = cocycle_factors(model, model.state(coeffs), ShiftDirection(0, 1, theta))
    assert factors["V"] == 0.0 and factors["W"] == pytest.approx(0.0, abs=1e-14)


def test_cocycle_is_density_ratio():
    model = make_model(QUARTIC, HARMONIC, box=((0, 2),))
    rng = np.random.default_rng(4)
    for _ in range(10):
        c = random_coeffs(model, rng)
        d = ShiftDirection(1, -1, theta=0.4)
        shifted = c.copy()
        shifted[1, model.n_modes - 1] += 0.4
        expected = log_density(model, model.state(shifted)) - log_density(model, model.state(c))
        assert rn_cocycle(model, model.state(c), d, log=True) == pytest.approx(expected, abs=1e-10)


def test_cocycle_factors_split_the_density_ratio():
    models = [
        make_model(QUARTIC, HARMONIC, box=((0, 2),)),
        make_model(QUARTIC, HARMONIC, box=((0, 1),), boundary="periodic"),
        ModelSpec.load("model2-polypair-d1-L4").compile(),
        ModelSpec.load("model1-frozen-d1-L4").compile(),
    ]
    rng = np.random.default_rng(6)
    for model in models:
        for k in (0, model.n_sites - 1):
            d = ShiftDirection(model.sites[k][0], 1, theta=0.35)
            c = random_coeffs(model, rng)
            factors = cocycle_factors(model, model.state(c), d)
            expected = log_cocycle_batch(model, c[None], d)[0]
            assert factors["W"] != 0.0, model.spec.name
            assert sum(factors.values()) == pytest.approx(expected, rel=1e-10, abs=1e-10), model.spec.name


def test_decoupled_sites_have_no_bond_factor():
    model = make_model(QUARTIC, box=((0, 2),))
    c = random_coeffs(model, np.random.default_rng(15))
    factors = cocycle_factors(model, model.state(c), ShiftDirection(1, 0, theta=0.5))
    assert factors["W"] == 0.0
    assert factors["V"] != 0.0


def test_cocycle_composition():
    model = make_model(QUARTIC, HARMONIC, box=((0, 2),))
    c = random_coeffs(model, np.random.default_rng(5), size=1000)
    h = np.zeros((model.n_sites, model.n_coeffs))
    h[0, model.n_modes] = 1.0
    theta, theta2 = 0.3, -0.45
    whole = log_cocycle_batch(model, c, ShiftDirection(0, 0, theta + theta2))
    first = log_cocycle_batch(model, c, ShiftDirection(0, 0, theta))
    second = log_cocycle_batch(model, c + theta * h, ShiftDirection(0, 0, theta2))
    assert np.allclose(whole, first + second, rtol=0, atol=1e-10)


def test_cocycle_derivative_is_logderiv():
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    c = random_coeffs(model, np.random.default_rng(7), size=20)
    eps = 1e-6
    fd = (log_cocycle_batch(model, c, ShiftDirection(1, 2, eps))
          - log_cocycle_batch(model, c, ShiftDirection(1, 2, -eps))) / (2 * eps)
    assert np.allclose(fd, logderiv_along(model, c, ShiftDirection(1, 2)), rtol=1e-5, atol=1e-6)


def test_custom_direction_shape_is_checked():
    model = make_model()
    with pytest.raises(DomainError):
        logderiv_b(model, model.state(), CoefficientDirection(0, np.ones(3)))


# ---------------------------------------------------------
# TEST 3: pCN
# ---------------------------------------------------------
def test_pcn_full_step_resamples_gaussian_exactly():
    model = ModelSpec.load("decoupled-gaussian-d1-L4").compile()
    cfg = ChainConfig(step=1.0, n_sweeps=2, burn_in=0)
    rng = np.random.default_rng(8)
    state, rates = model.state(), []
    for _ in range(200):
        state, stats = pcn_sweep(model, state, cfg, rng)
        rates.append(stats.rate)
    assert np.mean(rates) == 1.0


def test_pcn_tiny_step_is_almost_always_accepted():
    model = make_model(QUARTIC)
    cfg = ChainConfig(step=1e-6, n_sweeps=2, burn_in=0)
    rng = np.random.default_rng(9)
    state = model.state(random_coeffs(model, rng))
    accepted = proposed = 0.0
    for _ in range(500):
        state, stats = pcn_sweep(model, state, cfg, rng)
        accepted += stats.accepted.sum()
        proposed += stats.proposed.sum()
    assert accepted / proposed >= 0.99


class ZeroUniform:
    """A generator whose uniform draws are exactly zero."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def __getattr__(self, name):
        return getattr(self._rng, name)

    def random(self, size=None):
        return 0.0


def test_pcn_accepts_a_zero_uniform_draw():
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    cfg = ChainConfig(step=0.5, n_sweeps=2, burn_in=0)
    rng = ZeroUniform(14)
    state = model.state(random_coeffs(model, np.random.default_rng(14)))
    for _ in range(20):
        state, stats = pcn_sweep(model, state, cfg, rng)
        assert stats.rate == 1.0
    assert np.all(np.isfinite(state.coeffs))


def test_pcn_detailed_balance():
    model = make_model(QUARTIC, HARMONIC, box=((0, 2),))
    rng = np.random.default_rng(10)
    s = 0.6
    for _ in range(20):
        c = random_coeffs(model, rng)
        c_new = c.copy()
        c_new[1] = random_coeffs(model, rng)[1]
        a, b = model.state(c), model.state(c_new)
        forward = log_density(model, a) + pcn_log_transition(model, a, b, 1, s)
        backward = log_density(model, b) + pcn_log_transition(model, b, a, 1, s)
        assert forward == pytest.approx(backward, rel=1e-10, abs=1e-10)


def test_pcn_transition_rejects_multi_site_moves():
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    rng = np.random.default_rng(11)
    a, b = model.state(random_coeffs(model, rng)), model.state(random_coeffs(model, rng))
    with pytest.raises(DomainError):
        pcn_log_transition(model, a, b, 0, 0.5)


def test_pcn_chain_matches_quadrature():
    model, result = quartic_chain()
    c0_sq = result.samples[:, 0, model.n_modes] ** 2
    mean, se = batch_means(c0_sq)
    exact = quadrature_moments(model, QuadratureSpec(orders=[12, 12, 24, 12, 12])).second_moments[0][model.n_modes]
    assert abs(mean - exact) <= 5 * se


# ---------------------------------------------------------
# TEST 4: Langevin
# ---------------------------------------------------------
def test_ou_step_keeps_the_gaussian_stationary():
    lam = spectrum(np.arange(-3, 4), make_model().params)
    decay, std = ou_step_parameters(lam, 0.05)
    assert np.allclose(decay**2 / lam + std**2, 1.0 / lam, rtol=1e-14)


def test_langevin_is_exact_for_gaussian():
    model = make_model()
    result = run_chain(model, ChainConfig(sampler="langevin", dt=0.1, n_sweeps=20_000, burn_in=500, seed=12))
    for n in range(-2, 3):
        mean, se = batch_means(result.samples[:, 0, n + 2] ** 2)
        assert abs(mean - 1.0 / spectrum(n, model.params)) <= 5 * se


def test_noise_free_langevin_descends_the_action():
    model = make_model(QUARTIC, n_modes=4)
    rng = np.random.default_rng(13)
    cfg = ChainConfig(sampler="langevin", dt=0.001, noise=False, n_sweeps=2, burn_in=0)
    state = model.state(random_coeffs(model, rng, scale=3.0))
    energy = -log_density(model, state)
    for _ in range(100):
        state = langevin_sweep(model, state, cfg, rng)
        new = -log_density(model, state)
        assert new <= energy + 1e-12 * abs(energy)
        energy = new


def test_langevin_overflow_is_a_step_size_error():
    model = make_model(QUARTIC)
    cfg = ChainConfig(sampler="langevin", dt=0.01, n_sweeps=2, burn_in=0)
    state = model.state(np.full((1, model.n_coeffs), 1e200))
    with np.errstate(all="ignore"), pytest.raises(StepSizeError):
        langevin_sweep(model, state, cfg, np.random.default_rng(0))


# ---------------------------------------------------------
# TEST 5: Chains, checkpoints and sample files
# ---------------------------------------------------------
def test_run_chain_is_deterministic():
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    cfg = ChainConfig(n_sweeps=600, burn_in=100, seed=21)
    a, b = run_chain(model, cfg), run_chain(model, cfg)
    assert np.array_equal(a.samples, b.samples)
    assert a.report.model_dump() == b.report.model_dump()


def test_resume_reproduces_the_uninterrupted_chain():
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    cfg = ChainConfig(n_sweeps=1000, burn_in=100, checkpoint_every=500, seed=22)
    saved = []
    full = run_chain(model, cfg, checkpoint_sink=saved.append)
    middle = next(ck for ck in saved if ck.sweep == 500)
    before = full.samples[full.sweeps < 500]
    resumed = run_chain(model, cfg, resume=middle, previous_samples=before)
    assert np.array_equal(resumed.samples, full.samples[full.sweeps >= 500])
    assert resumed.report.model_dump() == full.report.model_dump()
    assert full.report.checkpoints == [500, 1000]


def test_checkpoint_and_sample_files_roundtrip(tmp_path):
    model = make_model(QUARTIC, HARMONIC, box=((0, 1),))
    cfg = ChainConfig(n_sweeps=300, burn_in=50, seed=23)
    path = tmp_path / "samples.bin"
    with SampleWriter(path, model.n_sites, model.n_coeffs) as writer:
        result = run_chain(model, cfg, sample_sink=writer)

    sweeps, samples = read_samples(path, model.n_sites, model.n_coeffs)
    assert np.array_equal(samples, result.samples)
    assert np.array_equal(sweeps, result.sweeps)

    truncate_samples(path, model.n_sites, model.n_coeffs, 200)
    sweeps, _ = read_samples(path, model.n_sites, model.n_coeffs)
    assert sweeps.max() == 199

    write_checkpoint(tmp_path / "checkpoint.bin", result.checkpoint)
    back = read_checkpoint(tmp_path / "checkpoint.bin", model.n_sites, model.n_coeffs)
    assert back.sweep == 300
    assert np.array_equal(back.coeffs, result.checkpoint.coeffs)
    assert back.rng_state == result.checkpoint.rng_state
    assert back.checkpoints == result.checkpoint.checkpoints


def test_thinning():
    model = make_model(QUARTIC)
    result = run_chain(model, ChainConfig(n_sweeps=1100, burn_in=100, thin=10, seed=24))
    assert result.report.n_kept == 100
    assert np.all(np.diff(result.sweeps.astype(int)) == 10)


def test_disjoint_seeds_agree():
    model = ModelSpec.load("decoupled-gaussian-d1-L4").compile()
    cfg = ChainConfig(step=1.0, adapt_step=False, n_sweeps=4000, burn_in=100)
    a = run_chain(model, cfg.model_copy(update={"seed": 1})).report.observables["omega0_sq_mean"]
    b = run_chain(model, cfg.model_copy(update={"seed": 2})).report.observables["omega0_sq_mean"]
    assert abs(a.mean - b.mean) <= 5 * math.hypot(a.se, b.se)


def test_burn_in_must_be_shorter_than_the_run():
    with pytest.raises(ValueError):
        ChainConfig(n_sweeps=100, burn_in=100)


# ---------------------------------------------------------
# TEST 6: Diagnostics
# ---------------------------------------------------------
def test_batch_means_and_iat_for_independent_data():
    x = np.random.default_rng(30).standard_normal(10_000)
    mean, se = batch_means(x)
    assert abs(mean) < 5 * se
    assert 0.005 < se < 0.02
    assert 1.0 <= integrated_autocorr_time(x) < 1.5


def test_iat_of_autoregressive_series():
    rng = np.random.default_rng(31)
    x = np.zeros(50_000)
    for t in range(1, x.size):
        x[t] = 0.9 * x[t - 1] + rng.standard_normal()
    assert 12.0 < integrated_autocorr_time(x) < 28.0


# ---------------------------------------------------------
# TEST 7: Matsubara functions
# ---------------------------------------------------------
def test_gaussian_matsubara_is_green():
    model = make_model(n_modes=16)
    samples = sample_bridge(model.params, 16, np.random.default_rng(40), size=20_000)[:, None, :]
    q = lambda v: v
    for tau in (0.0, 0.2, 0.5):
        est = matsubara(model, samples, [(0, q), (0, q)], [0.0, tau])
        assert abs(est.value - green(0.0, tau, model.params, cutoff=16)) <= 5 * est.se


def test_constant_observable():
    model = make_model()
    samples = sample_bridge(model.params, 2, np.random.default_rng(41), size=500)[:, None, :]
    est = matsubara(model, samples, [(0, np.ones_like)], [0.3])
    assert est.value == 1.0 and est.se == 0.0


def test_matsubara_needs_samples():
    model = make_model()
    with pytest.raises(InsufficientDataError):
        matsubara(model, np.zeros((0, 1, model.n_coeffs)), [(0, np.square)], [0.2])


def test_unordered_times_are_rejected():
    model = make_model()
    samples = np.zeros((10, 1, model.n_coeffs))
    with pytest.raises(DomainError):
        matsubara(model, samples, [(0, np.square), (0, np.square)], [0.5, 0.2])


def test_time_reflection_symmetry():
    model, result = quartic_chain()
    q = lambda v: v
    beta = model.params.beta
    for tau in (0.2, 0.35):
        a = matsubara(model, result.samples, [(0, q), (0, q)], [0.0, tau])
        b = matsubara(model, result.samples, [(0, q), (0, q)], [0.0, beta - tau])
        assert abs(a.value - b.value) <= 5 * math.hypot(a.se, b.se)

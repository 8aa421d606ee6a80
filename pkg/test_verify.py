"""
Tests for the verification suites, run on exact bridge samples so that
every identity holds without chain error.
"""

from functools import lru_cache

import numpy as np
import pytest

from errors import DomainError, InsufficientDataError
from gibbs import ChainConfig, ShiftDirection, batch_means, run_chain
from interaction import ModelSpec
from loop_core import sample_bridge, trace_power
from oracle import QuadratureSpec, quadrature_ibp_residuals, quadrature_moments
from verify import (
    LOWER_BOUND,
    SOBOLEV_MOMENT,
    UPPER_BOUND,
    LocalObservable,
    condition_constants,
    conditions_verdicts,
    default_directions,
    dlr_test,
    fit_loglog,
    flow_test,
    function_catalog,
    holder_scaling,
    ibp_test,
    langevin_agreement,
    moment_suite,
    site_moment_series,
    temperedness_report,
    volume_ladder_models,
)


def make_model(potential=(), box=((0, 0),), n_modes=8, boundary="zero"):
    return ModelSpec.model_validate({
        "name": "verify-test",
        "oscillator": {"m": 1.0, "a": 1.0, "beta": 1.0},
        "potential": {"polynomial": list(potential)},
        "coupling": {"kind": "none"},
        "lattice": {"d": 1, "box": [list(b) for b in box], "boundary": {"mode": boundary}},
        "discretization": {"n_modes": n_modes},
    }).compile()


def bridge_samples(model, size, seed):
    """iid draws of the decoupled Gaussian measure, shaped (size, n_sites, 2N+1)."""
    rng = np.random.default_rng(seed)
    flat = sample_bridge(model.params, model.n_modes, rng, size=size * model.n_sites)
    return flat.reshape(size, model.n_sites, model.n_coeffs)


@lru_cache(maxsize=None)
def gaussian_case():
    model = make_model()
    return model, bridge_samples(model, 5000, seed=11)


@lru_cache(maxsize=None)
def quartic_case():
    """Single quartic site with one mode pair: a pCN chain and the quadrature value of E[c_0^2]."""
    model = make_model((0.0, 0.0, 0.0, 1.0), n_modes=1)
    chain = run_chain(model, ChainConfig(n_sweeps=20_000, burn_in=1_000, seed=17)).samples
    exact = quadrature_moments(model, QuadratureSpec(orders=[40, 40, 40])).second_moments[0][model.n_modes]
    return model, chain, exact


def coupled_model(strength):
    return ModelSpec.model_validate({
        "name": "verify-coupled",
        "oscillator": {"m": 1.0, "a": 1.0, "beta": 1.0},
        "potential": {"polynomial": [0.0, 0.0, 0.0, 1.0]},
        "coupling": {"kind": "harmonic_nn", "strength": strength},
        "lattice": {"d": 1, "box": [[0, 3]], "boundary": {"mode": "periodic"}},
        "discretization": {"n_modes": 4},
    }).compile()

# ---------------------------------------------------------
# TEST 1: Test functions
# ---------------------------------------------------------
def test_catalog_has_twenty_distinct_functions():
    model, _ = gaussian_case()
    catalog = function_catalog(model)
    assert len(catalog) == 20
    assert len({f.name for f in catalog}) == 20
    with pytest.raises(DomainError):
        function_catalog(model, site=(3,))


def test_catalog_derivatives_match_finite_differences():
    model, samples = gaussian_case()
    c = samples[:50]
    h = np.zeros((model.n_sites, model.n_coeffs))
    h[0, model.n_modes + 1] = 1.0
    h[0, model.n_modes - 2] = -0.5
    eps = 1e-6
    for f in function_catalog(model):
        numeric = (f.value(c + eps * h) - f.value(c - eps * h)) / (2 * eps)
        assert np.allclose(f.derivative_along(c, h), numeric, atol=1e-6), f.name


# ---------------------------------------------------------
# TEST 2: Integration by parts and flows
# ---------------------------------------------------------
def test_ibp_passes_on_exact_samples():
    model, samples = gaussian_case()
    verdicts = ibp_test(model, samples, default_directions(model), seed=11)
    assert len(verdicts) == 20 * 5
    assert all(v.passed for v in verdicts)
    assert {v.metadata["direction"] for v in verdicts} == {d.label for d in default_directions(model)}


def test_ibp_rejects_the_wrong_drift():
    model, samples = gaussian_case()
    quartic = make_model((0.0, 0.0, 0.0, 1.0))
    linear = [f for f in function_catalog(quartic) if f.name == "c0"]
    (verdict,) = ibp_test(quartic, samples, [ShiftDirection(0, 0)], linear)
    assert not verdict.passed
    assert abs(verdict.z) > 10


def test_ibp_needs_enough_samples():
    model, samples = gaussian_case()
    with pytest.raises(InsufficientDataError):
        ibp_test(model, samples[:50], default_directions(model))


def test_ibp_classification_agrees_with_quadrature():
    model, chain, _ = quartic_case()
    fns = [f for f in function_catalog(model) if f.name in ("c0", "sin(c0)", "tanh(c0)")]
    directions = [ShiftDirection(0, 0)]
    residuals = quadrature_ibp_residuals(model, fns, directions, QuadratureSpec(orders=[40, 40, 40]))
    assert max(r.relative for r in residuals) <= 1e-6
    assert all(v.passed for v in ibp_test(model, chain, directions, fns, seed=17))

    wrong = bridge_samples(model, 5000, seed=18)
    by_name = {v.metadata["function"]: v for v in ibp_test(model, wrong, directions, fns, seed=18)}
    assert not by_name["c0"].passed


def test_flow_at_zero_is_trivial():
    model, samples = gaussian_case()
    verdicts = flow_test(model, samples[:10], ShiftDirection(0, 1), 0.0)
    assert all(v.statistic == 0.0 and v.se == 0.0 and v.passed for v in verdicts)


def test_flow_needs_samples():
    model, samples = gaussian_case()
    with pytest.raises(InsufficientDataError):
        flow_test(model, samples[:0], ShiftDirection(0, 1), 0.0)


def test_flow_passes_on_exact_samples():
    model, samples = gaussian_case()
    verdicts = flow_test(model, samples, ShiftDirection(0, 0), 0.3)
    assert len(verdicts) == 20
    assert all(v.passed for v in verdicts)


# ---------------------------------------------------------
# TEST 3: DLR consistency
# ---------------------------------------------------------
def test_dlr_leaves_outside_observables_untouched():
    model = make_model(box=((0, 2),), n_modes=4)
    samples = bridge_samples(model, 400, seed=5)
    observables = [LocalObservable((s,), 0.0, np.square, f"w{s}") for s in range(3)]
    verdicts = dlr_test(model, samples, [[1, 1]], observables, n_resweeps=5, seed=5)
    by_name = {v.metadata["observable"]: v for v in verdicts}
    for name in ("w0", "w2"):
        assert by_name[name].statistic == 0.0
        assert not by_name[name].metadata["inside"]
    assert by_name["w1"].metadata["inside"]
    assert all(v.passed for v in verdicts)


def test_dlr_subvolume_must_be_inside():
    model = make_model(box=((0, 2),), n_modes=4)
    with pytest.raises(DomainError):
        dlr_test(model, bridge_samples(model, 200, seed=1), [[2, 4]])


# ---------------------------------------------------------
# TEST 4: Langevin agreement
# ---------------------------------------------------------
def test_langevin_agreement_with_exact_value():
    model = make_model()
    runs = [bridge_samples(model, 4000, seed=s) for s in (1, 2, 3)]
    verdicts = langevin_agreement(model, *runs, dt=0.05, exact=1.0 / model.lam[model.n_modes])
    assert len(verdicts) == 3
    assert all(v.passed for v in verdicts)
    assert verdicts[0].metadata["observable"] == "c_0^2"



def test_langevin_chains_extrapolate_to_quadrature():
    model, chain, exact = quartic_case()
    dt = 0.05
    coarse = run_chain(model, ChainConfig(sampler="langevin", dt=dt, n_sweeps=40_000, burn_in=1_000, seed=18))
    fine = run_chain(model, ChainConfig(sampler="langevin", dt=dt / 2, n_sweeps=40_000, burn_in=1_000, seed=19))
    verdicts = langevin_agreement(model, chain, coarse.samples, fine.samples, dt=dt, exact=exact)
    assert len(verdicts) == 3
    assert all(v.passed for v in verdicts)
    assert verdicts[1].metadata["exact"] == pytest.approx(exact)

# ---------------------------------------------------------
# TEST 5: Moments and Hoelder scaling
# ---------------------------------------------------------
def test_moment_suite_on_a_decoupled_ladder():
    base = make_model(box=((0, 3),), boundary="periodic")
    models = volume_ladder_models(base, [2, 4])
    assert [m.n_sites for m in models] == [2, 4]
    samples = [bridge_samples(m, 2000, seed=20 + m.n_sites) for m in models]
    rows, verdicts = moment_suite(models, samples, Q_list=(2.0,), alpha_list=(0.25,))
    assert len(rows) == 4 * (2 + 4)
    assert all(v.kind == UPPER_BOUND for v in verdicts)
    assert all(v.passed for v in verdicts)
    with pytest.raises(DomainError):
        moment_suite(models, samples, Q_list=(0.5,))


def test_gaussian_sobolev_moment_is_the_trace():
    model, samples = gaussian_case()
    for alpha in (0.0, 0.25):
        series = site_moment_series(model, samples, SOBOLEV_MOMENT, 2.0, alpha)[:, 0]
        mean, se = batch_means(series)
        assert abs(mean - trace_power(alpha, model.params, model.n_modes).value) <= 5 * se


def test_loglog_fit_recovers_a_power_law():
    rhos = np.geomspace(0.01, 0.3, 8)
    slope, se, intercept = fit_loglog(rhos, 2.0 * rhos**1.5, 0.01 * rhos**1.5)
    assert slope == pytest.approx(1.5, abs=1e-10)
    assert intercept == pytest.approx(np.log(2.0), abs=1e-10)


def test_holder_slopes_on_bridge_samples():
    model = ModelSpec.load("gaussian-single-site").compile()
    samples = bridge_samples(model, 4000, seed=8)
    fits, verdicts = holder_scaling(model, samples, Q_list=(1, 2), seed=8)
    assert [f.Q for f in fits] == [1, 2]
    slopes = [v for v in verdicts if v.test == "holder"]
    assert all(v.kind == LOWER_BOUND and v.passed for v in slopes)
    wick = [v for v in verdicts if v.test == "holder-wick"]
    assert len(wick) == 2 and all(v.passed for v in wick)


def test_holder_rho_range_checks():
    model, samples = gaussian_case()
    with pytest.raises(DomainError):
        holder_scaling(model, samples, rhos=[0.01, 0.1])
    with pytest.raises(DomainError):
        holder_scaling(model, samples, rhos=[0.001, 0.6])


# ---------------------------------------------------------
# TEST 6: Conditions and temperedness
# ---------------------------------------------------------
def test_decoupled_conditions():
    model = ModelSpec.load("decoupled-gaussian-d1-L4").compile()
    table, verdicts = conditions_verdicts(model)
    assert [cc.Q for cc in table] == [1.0, 2.0, 3.0]
    assert all(cc.Theta0 == 0.0 and cc.Theta0_prime == 0.0 for cc in table)
    assert all(cc.K3_threshold == float("inf") for cc in table)
    assert all(v.passed for v in verdicts)


def test_xi_is_affine_in_Q():
    model = ModelSpec.load("decoupled-gaussian-d1-L4").compile()
    constants = {"1": 0.5, "2": 0.1, "3": None}
    xs = [condition_constants(model, Q, constants).Xi_Q for Q in (1.0, 2.0, 3.0)]
    trace = condition_constants(model, 1.0, constants).trace_inv
    assert xs[0] == pytest.approx(0.5 * trace)
    assert xs[2] - xs[1] == pytest.approx(xs[1] - xs[0])
    with pytest.raises(DomainError):
        condition_constants(model, 0.5, constants)


FITTED = {"1": 0.1, "2": 0.1, "3": 0.2}


def test_theta0_grows_with_the_coupling():
    table = [condition_constants(coupled_model(J), 2.0, FITTED) for J in (0.05, 0.1, 0.2, 0.4)]
    thetas = [cc.Theta0 for cc in table]
    assert all(a < b for a, b in zip(thetas, thetas[1:]))
    for cc in table:
        assert cc.M2 == 3.0 * 2.0**2
        assert cc.M1 == cc.M2
        assert cc.Theta0_prime == pytest.approx(0.2 * cc.M2 * cc.J_triple)
        expected = cc.J_triple * 0.2 * cc.M2 * (1.0 + cc.trace_inv) / (1.0 - 0.1 * cc.trace_inv)
        assert cc.Theta0 == pytest.approx(expected)


def test_explicit_M1_only_moves_theta0():
    model = coupled_model(0.1)
    default = condition_constants(model, 2.0, FITTED)
    light = condition_constants(model, 2.0, FITTED, M1=0.0)
    assert light.M1 == 0.0 and light.M2 == default.M2
    assert light.Theta0 < default.Theta0
    assert light.Theta0 == pytest.approx(light.J_triple * 0.2 * light.M2 / (1.0 - 0.1 * light.trace_inv))
    assert light.Theta0_prime == default.Theta0_prime
    assert light.Xi_Q == default.Xi_Q
    with pytest.raises(DomainError):
        condition_constants(model, 2.0, FITTED, M1=-1.0)


def test_temperedness_of_a_frozen_boundary():
    model = ModelSpec.load("model1-frozen-d1-L4").compile()
    report = temperedness_report(model)
    assert len(report) == 2
    assert all(e.boundary_norm > 0 and e.sample_norm_mean is None for e in report)
    zeros = np.zeros((3, model.n_sites, model.n_coeffs))
    report = temperedness_report(model, zeros)
    assert all(e.sample_norm_max == 0.0 for e in report)

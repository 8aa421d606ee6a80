"""
Tests for potentials, assumption fitting, coupling seminorms, model documents
and the interaction kernels (Nemytskii drift, action, coercivity).
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from errors import ConfigurationError, DivergenceError, DomainError
from interaction import (
    EXPONENTIAL,
    HARMONIC_NN,
    NONE,
    PAIR_MATRIX,
    POLY_PAIR_NN,
    POLYNOMIAL,
    CouplingSpec,
    ExpPairPotential,
    ModelSpec,
    PolynomialPotential,
    WeightSystem,
    action,
    action_from_values,
    check_V_assumptions,
    coercivity_L,
    drift_from_values,
    eval_V,
    j_seminorm,
    k3_threshold,
    k3_threshold_moment,
    lattice_offsets,
    many_body_family_check,
    nemytskii_F,
    parse_site,
    site_key,
    triple_seminorm,
)
from loop_core import SpectralLoop


def make_model(potential=(), coupling=None, box=((0, 0),), boundary=None, n_modes=4, beta=1.0, **extra):
    doc = {
        "name": "test",
        "oscillator": {"m": 1.0, "a": 1.0, "beta": beta},
        "potential": {"polynomial": list(potential)},
        "coupling": coupling or {"kind": "none"},
        "lattice": {"d": len(box), "box": [list(b) for b in box], "boundary": boundary or {"mode": "zero"}},
        "discretization": {"n_modes": n_modes},
        **extra,
    }
    return ModelSpec.model_validate(doc).compile()


def constant_state(model, values):
    coeffs = np.stack([SpectralLoop.constant(v, model.params, model.n_modes).coeffs for v in values])
    return model.state(coeffs)


# ---------------------------------------------------------
# TEST 1: One-site potentials
# ---------------------------------------------------------
def test_eval_V_examples():
    quartic = PolynomialPotential((0.0, 0.0, 0.0, 1.0))
    assert eval_V(quartic, 2.0, 0) == pytest.approx(16.0)
    assert eval_V(quartic, 2.0, 1) == pytest.approx(32.0)
    assert eval_V(ExpPairPotential(1.0), 0.0, 2) == pytest.approx(2.0)


def test_eval_V_order_domain():
    with pytest.raises(DomainError):
        eval_V(PolynomialPotential((0.0, 1.0)), 1.0, 3)


def test_polynomial_properties():
    pot = PolynomialPotential((0.0, -5.0, 0.0, 1.0))
    assert pot.degree == 4
    assert pot.is_even
    assert not PolynomialPotential((1.0, 0.0, 0.0, 1.0)).is_even
    with pytest.raises(DomainError):
        PolynomialPotential((0.0, -1.0))


# ---------------------------------------------------------
# TEST 2: Assumption fitting
# ---------------------------------------------------------
def test_quartic_satisfies_assumptions():
    report = check_V_assumptions(PolynomialPotential((0.0, 0.0, 0.0, 1.0)), (-10.0, 10.0), 4001)
    assert report.feasible
    assert report.growth_order == 4.0
    assert report.sandwich.feasible


def test_linear_potential_violates_iii():
    report = check_V_assumptions(PolynomialPotential((1.0,)), (-10.0, 10.0), 401)
    fit = report.inequalities["iii"]
    assert not fit.feasible
    assert fit.witness is not None and fit.witness < 0
    assert report.constant("iii") is None


def test_double_well_is_feasible_with_positive_L3():
    report = check_V_assumptions(PolynomialPotential((0.0, -5.0, 0.0, 1.0)), (-10.0, 10.0), 4001)
    assert report.feasible
    assert report.inequalities["iii"].L > 0
    assert report.core_radius > 1.0


def test_assumption_sampling_floor():
    with pytest.raises(DomainError):
        check_V_assumptions(PolynomialPotential((0.0, 1.0)), samples=50)


# ---------------------------------------------------------
# TEST 3: Coupling seminorms and thresholds
# ---------------------------------------------------------
def test_nearest_neighbor_seminorms():
    c = CouplingSpec(HARMONIC_NN, 1.0)
    assert j_seminorm(c, 0.0, 1).value == pytest.approx(2.0)
    assert j_seminorm(c, 1.0, 1).value == pytest.approx(4.0)
    assert j_seminorm(c, 0.0, 1).tilde_row_sum == pytest.approx(2.0**2 * 2.0)
    assert triple_seminorm(c, 1.0, 1) == pytest.approx(6.0)


def test_exponential_envelope_seminorm():
    c = CouplingSpec(PAIR_MATRIX, 1.0, envelope=EXPONENTIAL, rate=2.0, radius=30)
    report = j_seminorm(c, 1.0, 1, weight_kind=EXPONENTIAL)
    assert report.value == pytest.approx(2.0 / (math.e - 1.0), rel=1e-10)
    assert report.tail_bound < 1e-10


def test_slow_envelope_diverges():
    c = CouplingSpec(PAIR_MATRIX, 1.0, envelope=POLYNOMIAL, rate=1.5, radius=5)
    with pytest.raises(DivergenceError):
        j_seminorm(c, 0.0, 1, weight_kind=POLYNOMIAL)


def test_k3_thresholds():
    assert k3_threshold(CouplingSpec(HARMONIC_NN, 1.0)) == pytest.approx(0.25)
    quartic_pair = CouplingSpec(POLY_PAIR_NN, 0.5, PolynomialPotential((0.0, 0.0, 0.0, 1.0)))
    assert k3_threshold(quartic_pair) == pytest.approx(1.0 / 16.0)
    assert k3_threshold(CouplingSpec(NONE)) == math.inf
    assert k3_threshold_moment(CouplingSpec(HARMONIC_NN, 1.0)) == pytest.approx(1.0 / (3 * 2 * 4 * 2))


def test_many_body_family_equivalence():
    report = many_body_family_check()
    assert report.order == 3
    assert report.equivalence_holds
    assert report.triple_norm[0.0] == pytest.approx(3.0 * report.norm[0.0])


def test_lattice_offsets():
    assert lattice_offsets(1, 1.0) == [(-1,), (1,)]
    assert len(lattice_offsets(2, 1.0)) == 4
    assert lattice_offsets(1, 2.0, half=True) == [(1,), (2,)]


def test_weight_submultiplicativity():
    assert WeightSystem(EXPONENTIAL, 0.5).submultiplicativity(1) <= 1.0 + 1e-12
    assert WeightSystem(POLYNOMIAL, 1.0).submultiplicativity(2) <= 2.0 + 1e-12


# ---------------------------------------------------------
# TEST 4: Model documents
# ---------------------------------------------------------
def test_site_keys_roundtrip():
    assert site_key((1, -2)) == "1,-2"
    assert parse_site("1,-2") == (1, -2)


def test_invalid_documents_are_rejected():
    with pytest.raises(ValidationError):
        ModelSpec.model_validate({"potential": {"polynomial": [0.0, 0.0, 1.0]}})
    with pytest.raises(ValidationError):
        ModelSpec.model_validate({"oscillator": {"a": -1.0}})
    with pytest.raises(ValidationError):
        ModelSpec.model_validate({"lattice": {"d": 2, "box": [[0, 3]]}})
    with pytest.raises(ValidationError):
        ModelSpec.model_validate({"discretization": {"n_modes": 8, "grid": 10}})


def test_poly_pair_needs_lower_degree_than_potential():
    with pytest.raises(ValidationError):
        ModelSpec.model_validate({
            "potential": {"polynomial": [0.0, 0.0, 0.0, 1.0]},
            "coupling": {"kind": "poly_pair_nn", "strength": 1.0, "profile": [0.0, 0.0, 0.0, 1.0]},
        })


def test_model_hash_is_stable():
    a = make_model((0.0, 0.0, 0.0, 1.0))
    b = make_model((0.0, 0.0, 0.0, 1.0))
    c = make_model((0.0, 0.0, 0.0, 2.0))
    assert a.hash == b.hash
    assert a.hash != c.hash


def test_unknown_preset_name():
    with pytest.raises(ConfigurationError):
        ModelSpec.load("no-such-preset")


def test_periodic_ring_of_two_sites_has_two_bonds():
    model = ModelSpec.load("harmonic-ring-L2").compile()
    assert model.pair_i.size == 2
    assert model.boundary_sites == ()


def test_frozen_boundary_without_source_names_the_span():
    with pytest.raises(ConfigurationError) as exc:
        make_model((0.0, 0.0, 0.0, 1.0), {"kind": "harmonic_nn", "strength": 1.0}, box=((0, 3),),
                   boundary={"mode": "frozen"})
    assert "-1..4" in str(exc.value)


def test_frozen_boundary_preset_loads_loops():
    model = ModelSpec.load("model1-frozen-d1-L4").compile()
    assert model.boundary_sites == ((-1,), (4,))
    beta = model.params.beta
    assert model.boundary_coeffs[0, model.n_modes] == pytest.approx(0.5 * math.sqrt(beta))
    assert model.boundary_coeffs[1, model.n_modes] == pytest.approx(-0.5 * math.sqrt(beta))


def test_with_box_and_with_modes():
    model = ModelSpec.load("model1-quartic-d1-L4").compile()
    ring = model.with_box([(0, 5)], "periodic")
    assert ring.n_sites == 6
    assert ring.geometry.boundary_mode == "periodic"
    assert model.with_modes(3).n_coeffs == 7


# ---------------------------------------------------------
# TEST 5: Nemytskii drift
# ---------------------------------------------------------
def test_drift_of_quadratic_potential():
    model = make_model((0.0, 1.0))
    F = nemytskii_F(model, constant_state(model, [0.7]), (0,))
    assert np.allclose(F, 1.4)


def test_harmonic_coupling_drift():
    model = make_model((), {"kind": "harmonic_nn", "strength": 1.0}, box=((0, 2),))
    F = nemytskii_F(model, constant_state(model, [0.0, 1.0, 0.0]), (1,))
    assert np.allclose(F, 4.0)


def test_drift_matches_finite_differences_of_action():
    model = make_model((0.0, -1.0, 0.0, 1.0), {"kind": "harmonic_nn", "strength": 0.7}, box=((0, 2),))
    rng = np.random.default_rng(4)
    values = rng.standard_normal((model.n_sites, model.grid.n_points))
    F = drift_from_values(model, values)
    h = 1e-5
    fd = np.zeros_like(values)
    for i in range(model.n_sites):
        for j in range(model.grid.n_points):
            up, down = values.copy(), values.copy()
            up[i, j] += h
            down[i, j] -= h
            fd[i, j] = (action_from_values(model, up) - action_from_values(model, down)) / (2 * h * model.weight)
    assert np.allclose(fd, F, rtol=1e-5, atol=1e-6)


def test_drift_outside_volume():
    model = make_model((0.0, 1.0))
    with pytest.raises(DomainError):
        nemytskii_F(model, model.state(), (3,))


# ---------------------------------------------------------
# TEST 6: Action and coercivity
# ---------------------------------------------------------
def test_action_of_zero_state():
    model = make_model((0.0, 0.0, 0.0, 1.0), {"kind": "harmonic_nn", "strength": 1.0}, box=((0, 3),))
    assert action(model, model.state()) == 0.0


def test_action_with_frozen_zero_boundary():
    J, c1, c2 = 0.8, 0.6, -0.3
    model = make_model((), {"kind": "harmonic_nn", "strength": J}, box=((1, 2),),
                       boundary={"mode": "frozen", "constant": 0.0}, beta=1.5)
    expected = 1.5 * (J * (c1 - c2) ** 2 + J * c1**2 + J * c2**2)
    assert action(model, constant_state(model, [c1, c2])) == pytest.approx(expected, rel=1e-12)


def test_action_of_constant_quartic_loop():
    model = make_model((0.0, 0.0, 0.0, 1.0), beta=2.0)
    c = 0.9
    assert action(model, constant_state(model, [c])) == pytest.approx(2.0 * c**4, rel=1e-12)


def test_coercivity_functional():
    half_square = make_model((0.0, 0.5))
    assert coercivity_L(half_square, constant_state(half_square, [1.0]), (0,)) == pytest.approx(1.0)
    quartic = make_model((0.0, 0.0, 0.0, 1.0))
    assert coercivity_L(quartic, constant_state(quartic, [1.3]), (0,)) == pytest.approx(4 * 1.3**4)
    assert coercivity_L(quartic, quartic.state(), (0,)) == 0.0


def test_coercivity_with_coupling_part():
    model = make_model((0.0, 0.5), {"kind": "harmonic_nn", "strength": 1.0}, box=((0, 2),))
    state = constant_state(model, [0.0, 1.0, 0.0])
    assert coercivity_L(model, state, (1,)) == pytest.approx(1.0)
    assert coercivity_L(model, state, (1,), include_coupling=True) == pytest.approx(1.0 + 4.0)

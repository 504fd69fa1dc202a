import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwtree.env import (
    EnvironmentModel,
    InfeasibleError,
    ModelError,
    calibrate_two_point,
    check_hypotheses,
    kappa,
    psi,
    psi_prime,
)


def two_point_closed_form(offspring, low, high, prob_low, t):
    return offspring * (prob_low * math.exp(-t * low) + (1 - prob_low) * math.exp(-t * high))


class TestPsi:
    def test_lambda_biased_at_zero_counts_children(self, biased_tree):
        assert psi(biased_tree, 0.0) == 2.0

    def test_lambda_biased_at_one(self, biased_tree):
        assert psi(biased_tree, 1.0) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("t", [0.0, 0.3, 1.0, 1.7, 4.0])
    def test_two_point_matches_closed_form(self, t):
        model = EnvironmentModel.two_point(2, -0.4, 0.9, 0.3)
        assert psi(model, t) == pytest.approx(two_point_closed_form(2, -0.4, 0.9, 0.3, t), rel=1e-14)

    def test_tabulated_agrees_with_two_point(self):
        # a two-point model is the same as its four enumerated atoms
        tp = EnvironmentModel.two_point(2, -0.4, 0.9, 0.3)
        tab = EnvironmentModel.tabulated([(p, list(v)) for p, v in tp.atoms()])
        for t in (0.0, 0.5, 1.0, 2.5):
            assert psi(tab, t) == pytest.approx(psi(tp, t), rel=1e-13)

    def test_negative_argument_rejected(self, biased_tree):
        with pytest.raises(ValueError):
            psi(biased_tree, -0.5)

    def test_derivative_against_central_difference(self, model15):
        h = 1e-6
        numeric = (psi(model15, 1 + h) - psi(model15, 1 - h)) / (2 * h)
        assert psi_prime(model15, 1.0) == pytest.approx(numeric, rel=1e-7)


class TestKappa:
    def test_lambda_biased_has_no_heavy_tail(self, biased_tree):
        assert kappa(biased_tree) == math.inf

    @pytest.mark.parametrize("target", [1.5, 2.0, 1.2, 1.8])
    def test_calibrated_models(self, target):
        assert kappa(calibrate_two_point(target)) == pytest.approx(target, abs=1e-9)

    def test_requires_criticality(self):
        with pytest.raises(ValueError):
            kappa(EnvironmentModel.lambda_biased(3, 2.0))


class TestCalibration:
    @pytest.mark.parametrize("target", [1.5, 2.0])
    def test_contract(self, target):
        model = calibrate_two_point(target, 2)
        assert abs(psi(model, 1.0) - 1) < 1e-10
        assert abs(psi(model, target) - 1) < 1e-10

    @pytest.mark.parametrize("target", [1.0, 0.5, 2.5])
    def test_outside_range(self, target):
        with pytest.raises(InfeasibleError):
            calibrate_two_point(target, 2)

    def test_default_free_parameter(self):
        assert calibrate_two_point(1.5, 3).params["prob_low"] == pytest.approx(1 / 15)

    def test_bad_prob_low(self):
        with pytest.raises(InfeasibleError):
            calibrate_two_point(1.5, 2, prob_low=0.6)

    def test_known_marks_for_kappa_two(self, model20):
        # with prob_low = 1/10 the marks are -ln 2 and ln 3 exactly
        assert model20.params["mark_low"] == pytest.approx(-math.log(2), abs=1e-10)
        assert model20.params["mark_high"] == pytest.approx(math.log(3), abs=1e-10)

    @given(target=st.floats(1.05, 2.0), offspring=st.integers(2, 5))
    def test_round_trip_through_hypotheses(self, target, offspring):
        report = check_hypotheses(calibrate_two_point(target, offspring))
        assert report.passes_Hc and report.passes_Hk
        assert report.kappa == pytest.approx(target, abs=1e-8)


class TestHypotheses:
    def test_lambda_biased(self, biased_tree):
        report = check_hypotheses(biased_tree)
        assert report.passes_Hc
        assert report.kappa == math.inf
        assert not report.passes_Hk

    def test_calibrated(self, model15):
        report = check_hypotheses(model15)
        assert report.passes_Hc and report.passes_Hk
        assert report.m == 2.0

    def test_equal_marks_are_lattice(self):
        model = EnvironmentModel.two_point(2, math.log(2), math.log(2), 0.5)
        assert not check_hypotheses(model).non_lattice

    def test_rational_marks_are_lattice(self):
        assert not check_hypotheses(EnvironmentModel.two_point(2, -0.5, 1.5, 0.2)).non_lattice

    def test_calibrated_marks_are_non_lattice(self, model15):
        assert check_hypotheses(model15).non_lattice

    def test_subcritical_fails(self):
        assert not check_hypotheses(EnvironmentModel.lambda_biased(2, 3.0)).passes_Hc

    def test_report_serializes(self, model15):
        d = check_hypotheses(model15).to_dict()
        assert isinstance(d["hk_moment_finite"], list)


def test_malformed_models_rejected():
    with pytest.raises(ModelError):
        EnvironmentModel.from_dict({"kind": "two_point", "offspring": 2})
    with pytest.raises(ModelError):
        EnvironmentModel.from_dict({"kind": "nonsense"})


def test_dict_round_trip(model15):
    assert EnvironmentModel.from_dict(model15.to_dict()) == model15


# Properties.

marks = st.floats(-2.0, 3.0, allow_nan=False)
two_point_models = st.builds(
    EnvironmentModel.two_point,
    offspring=st.integers(1, 6),
    mark_low=marks,
    mark_high=marks,
    prob_low=st.floats(0.01, 0.99),
)


@given(two_point_models)
def test_psi_convex_on_grid(model):
    grid = np.linspace(0.0, 4.0, 81)
    values = np.array([psi(model, t) for t in grid])
    second = values[2:] - 2 * values[1:-1] + values[:-2]
    assert np.all(second >= -1e-9 * np.maximum(1.0, values[1:-1]))


@given(target=st.floats(1.05, 2.0), prob_frac=st.floats(0.05, 0.9))
def test_psi_below_one_between_one_and_kappa(target, prob_frac):
    model = calibrate_two_point(target, 2, prob_low=prob_frac / 2)
    grid = np.linspace(1.0, target, 42)[1:-1]
    assert all(psi(model, t) < 1 for t in grid)

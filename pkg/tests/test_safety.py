"""Uncertainty measure and the confidence-gated action selection."""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from highway_rpf import safety
from highway_rpf.env import FALLBACK_ACTION


def test_identical_members_have_zero_cv():
    q = np.tile(np.linspace(1, 10, 10), (4, 1))
    np.testing.assert_array_equal(safety.coefficient_of_variation(q), np.zeros(10))


def test_cv_closed_form_two_members():
    q = np.zeros((2, 10)) + 5.0
    q[0, 3], q[1, 3] = 9.9, 10.1
    cv = safety.coefficient_of_variation(q)
    assert cv[3] == pytest.approx(0.01)


def test_cv_scale_invariance():
    rng = np.random.default_rng(0)
    q = rng.normal(loc=5.0, size=(5, 10))
    base = safety.coefficient_of_variation(q)
    for c in (0.5, 3.0, 100.0):
        np.testing.assert_allclose(safety.coefficient_of_variation(c * q), base,
                                   rtol=1e-9)


def test_cv_near_zero_mean_is_infinite():
    q = np.array([[1e-9, 1.0], [-1e-9, 1.2]])
    cv = safety.coefficient_of_variation(q)
    assert np.isinf(cv[0]) and np.isfinite(cv[1])


def test_cv_requires_two_members():
    with pytest.raises(ValueError):
        safety.coefficient_of_variation(np.ones((1, 10)))


def test_select_unconstrained_equals_mean_argmax():
    rng = np.random.default_rng(1)
    q = rng.normal(loc=10.0, scale=0.01, size=(6, 10))
    action, report = safety.select_safe_action(q, cv_safe=1.0)
    assert action == int(np.argmax(q.mean(axis=0)))
    assert not report.fallback_used


def test_select_prefers_confident_action_over_higher_mean():
    # action 5 has the best mean but wild disagreement; action 2 is confident
    q = np.full((4, 10), 5.0)
    q[:, 2] = [6.0, 6.0, 6.0, 6.0]
    q[:, 5] = [40.0, -20.0, 30.0, -10.0]
    action, report = safety.select_safe_action(q, cv_safe=0.02)
    assert action == 2
    assert not report.fallback_used
    assert report.cv[5] > 0.02


def test_select_falls_back_to_hard_brake():
    rng = np.random.default_rng(2)
    q = rng.normal(scale=5.0, size=(4, 10))  # near-zero means, huge spread
    action, report = safety.select_safe_action(q, cv_safe=0.02)
    assert action == FALLBACK_ACTION
    assert report.fallback_used


def test_gate_contract_randomized():
    rng = np.random.default_rng(3)
    fallbacks = 0
    for _ in range(2000):
        q = rng.normal(loc=rng.uniform(-20, 20), scale=rng.uniform(0.01, 5.0),
                       size=(5, 10))
        action, report = safety.select_safe_action(q, cv_safe=0.02)
        if report.fallback_used:
            fallbacks += 1
            assert action == FALLBACK_ACTION
            assert not (report.cv < 0.02).any()
        else:
            assert report.cv[action] < 0.02
    assert 0 < fallbacks < 2000  # both branches exercised


def test_positive_rescaling_never_changes_selection():
    rng = np.random.default_rng(4)
    for _ in range(500):
        q = rng.normal(loc=rng.uniform(-10, 10), scale=rng.uniform(0.01, 2.0),
                       size=(4, 10))
        a1, _ = safety.select_safe_action(q, cv_safe=0.02)
        for c in (0.1, 7.3):
            a2, _ = safety.select_safe_action(c * q, cv_safe=0.02)
            assert a1 == a2


@given(st.floats(0.001, 10.0), st.integers(0, 2 ** 31))
@hsettings(max_examples=60, deadline=None)
def test_monotone_gate_property(threshold, seed):
    # lowering the threshold can only push decisions towards the fallback
    rng = np.random.default_rng(seed)
    q = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.01, 2.0), size=(3, 10))
    _, tight = safety.select_safe_action(q, cv_safe=threshold / 2)
    _, loose = safety.select_safe_action(q, cv_safe=threshold)
    assert not (loose.fallback_used and not tight.fallback_used)


def test_confidence_measure_formula():
    assert safety.confidence_measure(0.01, 0.01, 0.02) == pytest.approx(1.0)
    assert safety.confidence_measure(0.02, 0.01, 0.02) == pytest.approx(0.0)
    assert safety.confidence_measure(0.03, 0.0, 0.02) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        safety.confidence_measure(0.01, 0.02, 0.02)
    with pytest.raises(ValueError):
        safety.confidence_measure(0.01, -0.1, 0.02)


def test_report_csv_row_shape():
    q = np.random.default_rng(5).normal(size=(3, 10)) + 4.0
    _, report = safety.select_safe_action(q, cv_safe=0.5)
    header = safety.UncertaintyReport.csv_header(10)
    row = report.csv_row()
    assert len(header) == len(row) == 32
    assert header[-2:] == ["chosen_action", "fallback_used"]

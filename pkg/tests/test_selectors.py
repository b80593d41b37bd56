import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from moie import diffcore as dc
from moie.selectors import (RESIDUAL, CoveragePlan, Selector, SelectorCollapseError,
                            calibrate_threshold, coverage_penalty, empirical_coverage, route,
                            route_from_pi, selective_risk, stratify_coverage)

probs = st.floats(0.0, 1.0, allow_nan=False)


@pytest.mark.parametrize("tau, counts, expected", [
    (0.2, [80, 20], [0.16, 0.04]), (1.0, [50, 50], [0.5, 0.5]), (0.5, [9700, 300], [0.485, 0.015]),
])
def test_stratify(tau, counts, expected):
    np.testing.assert_allclose(stratify_coverage(tau, counts), expected)


def test_stratify_rejects_bad_tau():
    with pytest.raises(ValueError):
        stratify_coverage(0.0, [1, 1])


def test_plan_per_class():
    plan = CoveragePlan(0.4, np.array([0.8, 0.2]))
    np.testing.assert_allclose(plan.per_class, [0.32, 0.08])


@pytest.mark.parametrize("pi, soft", [(np.full(4, 0.5), 0.5), (np.ones(4), 1.0)])
def test_constant_selector_coverage(pi, soft):
    s, h = empirical_coverage(pi, np.array([0, 0, 1, 1]))
    np.testing.assert_allclose(s, [soft, soft])
    np.testing.assert_allclose(h, [1.0, 1.0])


def test_coverage_is_mean():
    s, h = empirical_coverage(np.array([0.2, 0.4, 0.9]), np.zeros(3, int), n_classes=1)
    assert s[0] == pytest.approx(0.5)
    assert h[0] == pytest.approx(1 / 3)


def test_selective_risk_examples():
    y = np.array([0, 0, 1, 1])
    assert selective_risk(np.zeros(4), None, np.array([0.5, 0.5]), y) == 0.0
    p, L = 0.3, 2.0
    # losses already carry the routing weight p
    r = selective_risk(np.full(3, L * p), None, np.array([p]), np.zeros(3, int), n_classes=1)
    assert r == pytest.approx(L)
    terms = [selective_risk(np.full(4, 1.0) * (y == m), None, np.array([0.9, 0.1]), y) for m in (0, 1)]
    assert terms[1] == pytest.approx(9 * terms[0])


def test_selective_risk_collapse():
    with pytest.raises(SelectorCollapseError, match="class 1"):
        selective_risk(np.ones(4), None, np.array([0.5, 0.0]), np.array([0, 0, 1, 1]))


def test_penalty_examples():
    assert coverage_penalty(np.array([0.6, 0.2]), np.array([0.5, 0.1]), 128) == 0.0
    assert coverage_penalty(np.array([0.3]), np.array([0.5]), 100) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        coverage_penalty(np.array([0.3]), np.array([0.5]), 0.0)


# coverages are fractions of a finite sample, so draw them on a 1/10000 grid
fractions = st.integers(0, 10_000).map(lambda k: k / 10_000)


@settings(max_examples=100, deadline=None)
@given(st.lists(fractions, min_size=3, max_size=3), st.lists(fractions, min_size=3, max_size=3))
def test_penalty_zero_iff_constraint_met(zeta, tau):
    zeta, tau = np.array(zeta), np.array(tau)
    zero = coverage_penalty(zeta, tau, 128) == 0.0
    assert zero == bool((zeta >= tau).all())


def test_penalty_differentiable():
    z = dc.parameter(np.array([0.2, 0.6]))
    coverage_penalty(z, np.array([0.5, 0.5]), 10).backward()
    np.testing.assert_allclose(z.grad, [-2 * 10 * 0.3, 0.0])


def test_route_examples():
    assert route_from_pi(np.array([[0.6, 0.9]]))[0] == 0
    assert route_from_pi(np.array([[0.1, 0.4]]))[0] == RESIDUAL
    assert route_from_pi(np.array([[0.5, 0.0]]))[0] == 0
    assert route_from_pi(np.array([[0.2, 0.5]]))[0] == 1


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 50), st.integers(1, 5)), elements=probs))
def test_routing_partition(pi):
    r = route_from_pi(pi)
    K = pi.shape[1]
    parts = [(r == k).mean() for k in range(K)] + [(r == RESIDUAL).mean()]
    assert sum(parts) == pytest.approx(1.0)
    assert set(np.unique(r)) <= set(range(K)) | {RESIDUAL}


def test_route_without_selectors():
    np.testing.assert_array_equal(route([], np.zeros((3, 2))), [RESIDUAL] * 3)


def test_selector_output_in_unit_interval(rng):
    s = Selector(4, seed=0)
    p = s.pi(rng.random((50, 4)))
    assert ((p > 0) & (p < 1)).all()


def test_shift_moves_threshold(rng):
    s = Selector(3, seed=2)
    C = rng.random((10, 3))
    z = s.logit(C)
    s.shift(1.5)
    np.testing.assert_allclose(s.logit(C), z + 1.5)


def test_calibration_meets_targets(rng):
    s = Selector(4, seed=3)
    C = rng.random((400, 4))
    y = (rng.random(400) < 0.25).astype(int)
    w = np.bincount(y) / y.size
    targets = w * 0.4
    info = calibrate_threshold(s, C, y, targets)
    hard = np.array([((s.pi(C) >= 0.5) & (y == m)).sum() for m in range(2)]) / y.size
    assert (hard >= targets - 1e-12).all()
    assert info["unreachable_classes"] == []


def test_calibration_reports_exhausted_class(rng):
    s = Selector(2, seed=0)
    C = rng.random((100, 2))
    y = np.r_[np.zeros(90, int), np.ones(10, int)]
    free = np.ones(100, bool)
    free[90:95] = False
    info = calibrate_threshold(s, C, y, np.array([0.3, 0.08]), available=free)
    assert info["unreachable_classes"] == [1]
    hard0 = ((s.pi(C) >= 0.5) & free & (y == 0)).sum() / 100
    assert hard0 >= 0.3


def test_calibration_preserves_order(rng):
    s = Selector(3, seed=4)
    C = rng.random((60, 3))
    before = np.argsort(s.logit(C), kind="stable")
    calibrate_threshold(s, C, rng.integers(0, 2, 60), np.array([0.2, 0.2]), rule="balanced")
    np.testing.assert_array_equal(np.argsort(s.logit(C), kind="stable"), before)

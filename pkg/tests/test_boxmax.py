import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sharpminima.boxmax import (Box, ObjectiveOracle, QuadraticObjective, maximize, project,
                                vertex_bruteforce_max)
from sharpminima.errors import NumericError, SizeError, SpecError


def fn_oracle(f, grad, p):
    return ObjectiveOracle(lambda z: (f(z), grad(z)), p)


def test_box_validation():
    with pytest.raises(SpecError):
        Box([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(SpecError):
        Box([0.0], [np.inf])
    with pytest.raises(SpecError):
        Box([0.0], [1.0, 2.0])


def test_project_cases():
    box = Box.symmetric([1.0, 1.0])
    assert np.array_equal(project([0.5, -0.2], box), [0.5, -0.2])
    assert np.array_equal(project([2.0, -2.0], box), [1.0, -1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_project_idempotent(z):
    box = Box([-1.0, 0.0, 2.0], [1.0, 0.5, 3.0])
    once = project(z, box)
    assert np.array_equal(project(once, box), once)
    assert box.contains(once)


def test_quadratic_symmetry_check():
    with pytest.raises(SpecError):
        QuadraticObjective([[1.0, 0.0], [1e-9, 1.0]], [0.0, 0.0])


def test_concave_interior_maximum():
    o = fn_oracle(lambda z: -(z[0] - 0.5) ** 2, lambda z: -2 * (z - 0.5), 1)
    z, v, _ = maximize(o, Box([0.0], [1.0]), [0.0])
    assert abs(z[0] - 0.5) <= 1e-8 and abs(v) <= 1e-8


@pytest.mark.parametrize("p", [1, 3, 10])
def test_linear_objective_hits_upper_corner(p):
    o = fn_oracle(lambda z: z.sum(), lambda z: np.ones_like(z), p)
    z, v, _ = maximize(o, Box.symmetric(np.ones(p)), np.zeros(p))
    assert v == p and np.array_equal(z, np.ones(p))


def test_constant_objective_returns_start():
    o = fn_oracle(lambda z: 3.0, lambda z: np.zeros_like(z), 2)
    z0 = np.array([0.1, -0.2])
    z, v, _ = maximize(o, Box.symmetric([1.0, 1.0]), z0)
    assert v == 3.0 and np.array_equal(z, z0)


def test_start_outside_box_rejected():
    o = fn_oracle(lambda z: 0.0, lambda z: np.zeros_like(z), 1)
    with pytest.raises(SpecError):
        maximize(o, Box([0.0], [1.0]), [2.0])


def test_non_finite_oracle_reports_point():
    o = fn_oracle(lambda z: np.inf if z[0] > 0.5 else z[0], lambda z: np.ones(1), 1)
    with pytest.raises(NumericError) as info:
        maximize(o, Box([0.0], [1.0]), [0.0])
    assert info.value.point is not None and info.value.point[0] > 0.5


def test_oracle_counts_calls():
    q = QuadraticObjective(np.eye(2), np.zeros(2))
    o = q.oracle()
    _, _, diag = maximize(o, Box.symmetric([1.0, 1.0]), np.zeros(2))
    assert diag.oracle_calls == o.calls > 0


def test_vertex_examples():
    v, val = vertex_bruteforce_max(QuadraticObjective(np.diag([1.0, 4.0]), [0.0, 0.0]), Box.symmetric([1.0, 1.0]))
    assert val == 2.5 and np.all(np.abs(v) == 1)
    v, val = vertex_bruteforce_max(QuadraticObjective(np.zeros((2, 2)), [1.0, 1.0]), Box.symmetric([1.0, 1.0]))
    assert val == 2.0 and np.array_equal(v, [1.0, 1.0])
    _, val = vertex_bruteforce_max(QuadraticObjective([[2.0]], [0.0]), Box.symmetric([1e-3]))
    assert val == pytest.approx(1e-6, rel=1e-15)
    with pytest.raises(SizeError):
        vertex_bruteforce_max(QuadraticObjective(np.eye(21), np.zeros(21)), Box.symmetric(np.ones(21)))


def random_convex(rng, p, diagonal=False, symmetric=False):
    if diagonal:
        H = np.diag(rng.uniform(0.0, 5.0, p))
    else:
        B = rng.standard_normal((p, p))
        H = B @ B.T
    g = rng.standard_normal(p)
    hi = rng.uniform(0.1, 2.0, p)
    lo = -hi if symmetric else -rng.uniform(0.1, 2.0, p)
    return QuadraticObjective(H, g, float(rng.uniform(0, 1))), Box(lo, hi)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.integers(1, 10))
def test_feasibility_and_start_value(seed, p):
    rng = np.random.default_rng(seed)
    q, box = random_convex(rng, p, diagonal=False)
    z0 = rng.uniform(box.lower, box.upper)
    z, v, diag = maximize(q.oracle(), box, z0)
    assert box.contains(z)
    assert v >= q.value(z0)
    assert v == pytest.approx(q.value(z), rel=0, abs=0)
    assert diag.iterations <= 10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.integers(1, 8))
def test_value_non_decreasing_in_iteration_budget(seed, p):
    rng = np.random.default_rng(seed)
    q, box = random_convex(rng, p, diagonal=False)
    values = [maximize(q.oracle(), box, np.zeros(p), k)[1] for k in (1, 2, 5, 10, 20)]
    assert all(b >= a for a, b in zip(values, values[1:]))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.integers(1, 10))
def test_matches_vertex_oracle_on_separable_quadratics(seed, p):
    # separable convex quadratic on a box symmetric about the start: each coordinate's best
    # end is the one its gradient at 0 points to, so ascent from 0 is globally optimal
    rng = np.random.default_rng(seed)
    q, box = random_convex(rng, p, diagonal=True, symmetric=True)
    exact = vertex_bruteforce_max(q, box)[1]
    v50 = maximize(q.oracle(), box, np.zeros(p), 50)[1]
    v10 = maximize(q.oracle(), box, np.zeros(p), 10)[1]
    assert v50 >= (1 - 1e-6) * exact
    assert v10 >= 0.95 * exact


def test_asymmetric_box_can_stop_at_a_local_maximum():
    # f = z^2/2 + z/10 on [-2, 1]: ascent from 0 reaches 0.6 at z = 1, the global max is 1.8 at z = -2
    q = QuadraticObjective([[1.0]], [0.1])
    box = Box([-2.0], [1.0])
    z, v, _ = maximize(q.oracle(), box, [0.0], 50)
    assert vertex_bruteforce_max(q, box)[1] == pytest.approx(1.8)
    assert z[0] == 1.0 and v == pytest.approx(0.6)


def test_coupled_quadratic_can_stop_at_a_local_maximum():
    # (1, -1) is a strict local max of this convex quadratic on the box; the global max is at (1, 1)
    q = QuadraticObjective([[1.0, 0.9], [0.9, 1.0]], [0.2, -0.2])
    box = Box.symmetric([1.0, 1.0])
    _, exact = vertex_bruteforce_max(q, box)
    z, v, _ = maximize(q.oracle(), box, np.zeros(2), 50)
    assert exact == pytest.approx(1.9)
    assert np.array_equal(z, [1.0, -1.0]) and v == pytest.approx(0.5)


def test_stationary_start_probes_corners():
    q = QuadraticObjective(np.diag([1.0, 4.0]), np.zeros(2))
    z, v, _ = maximize(q.oracle(), Box.symmetric([1e-3, 1e-3]), np.zeros(2))
    assert v == pytest.approx(2.5e-6, rel=1e-12)

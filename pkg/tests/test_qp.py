import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coalmpc.qp import INFEASIBLE, SOLVED, QuadraticProgram, dump_qp, kkt_residuals, solve_qp

from _builders import enumerate_qp, random_qp


def test_unconstrained_minimizer():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    g = np.array([1.0, -2.0])
    res = solve_qp(QuadraticProgram(H, g))
    assert res.status == SOLVED
    np.testing.assert_allclose(res.z, np.linalg.solve(H, -g), atol=1e-12)


def test_box_constrained_scalar():
    res = solve_qp(QuadraticProgram([[2.0]], [-10.0], 0.0, [[1.0]], [1.0]))
    assert res.solved
    assert res.z[0] == pytest.approx(1.0, abs=1e-10)
    assert res.y_ineq[0] == pytest.approx(8.0, abs=1e-8)
    assert res.objective == pytest.approx(1.0 - 10.0)


def test_equality_and_inequality():
    # min |z|^2 s.t. z1 + z2 = 1, z1 <= 0.2
    qp = QuadraticProgram(2 * np.eye(2), np.zeros(2), 0.0, [[1.0, 0.0]], [0.2], [[1.0, 1.0]], [1.0])
    res = solve_qp(qp)
    np.testing.assert_allclose(res.z, [0.2, 0.8], atol=1e-9)
    r = kkt_residuals(qp, res.z, res.y_ineq, res.y_eq)
    assert max(r.values()) < 1e-8


def test_infeasible_problem_is_reported():
    qp = QuadraticProgram(np.eye(1), [0.0], 0.0, [[1.0], [-1.0]], [-1.0, -1.0])
    res = solve_qp(qp, max_iterations=2000)
    assert res.status != SOLVED


def test_inconsistent_equalities_are_reported():
    qp = QuadraticProgram(np.eye(2), np.zeros(2), 0.0, None, None, [[1.0, 0.0], [1.0, 0.0]], [0.0, 1.0])
    assert solve_qp(qp).status == INFEASIBLE


def test_dimension_checks():
    with pytest.raises(ValueError):
        QuadraticProgram(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        QuadraticProgram(np.eye(2), np.zeros(2), 0.0, np.ones((1, 3)), [1.0])
    with pytest.raises(ValueError):
        solve_qp(QuadraticProgram(np.eye(1), [0.0]), tolerance=0.0)


def test_warm_start_gives_same_answer():
    rng = np.random.default_rng(5)
    H, g, A, b = random_qp(rng)
    qp = QuadraticProgram(H, g, 0.0, A, b)
    first = solve_qp(qp)
    again = solve_qp(qp, warm_start=first)
    np.testing.assert_allclose(first.z, again.z, atol=1e-9)


def test_dump_qp_writes_file(tmp_path):
    qp = QuadraticProgram(np.eye(2), np.ones(2), 0.0, [[1.0, 1.0]], [1.0])
    path = tmp_path / "qp.txt"
    dump_qp(qp, path)
    assert path.stat().st_size > 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_matches_enumeration_oracle(seed):
    H, g, A, b = random_qp(np.random.default_rng(seed), n_max=5, m_max=7)
    res = solve_qp(QuadraticProgram(H, g, 0.0, A, b))
    _, f_star = enumerate_qp(H, g, A, b)
    assert res.solved
    assert res.objective == pytest.approx(f_star, abs=1e-6, rel=1e-8)
    assert np.all(A @ res.z <= b + 1e-7)

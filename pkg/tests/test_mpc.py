import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coalmpc.lti import ModelSet, SubsystemModel, aggregate_coalition
from coalmpc.mpc import (MpcWeights, ReferenceTrajectory, TrackingProblem, best_response_iteration,
                         mpc_control, opponent_affine, simulate_open_loop, stage_cost)

from _builders import chain_model_set, riccati_inputs, stable_matrix


def single(rng, n=3, q=2, input_bound=None):
    box = None if input_bound is None else (-input_bound * np.ones(q), input_bound * np.ones(q))
    ms = ModelSet([SubsystemModel(1, stable_matrix(rng, n), rng.normal(size=(n, q)), input_box=box)])
    return ms, aggregate_coalition(ms, (1,))


def weights_for(ms, scale=1.0, Qf_scale=20.0):
    return MpcWeights({(i, i): scale * np.eye(ms[i].n) for i in ms.ids},
                      {i: np.eye(ms[i].q) for i in ms.ids}, Qf_scale)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), Np=st.integers(1, 8))
def test_unconstrained_mpc_equals_riccati(seed, Np):
    rng = np.random.default_rng(seed)
    ms, cm = single(rng)
    w = weights_for(ms)
    x0 = rng.normal(size=cm.n)
    sol = mpc_control(cm, x0, ReferenceTrajectory.zeros(cm.n, cm.q, Np), w, Np)
    Q, R = w.matrices((1,))
    np.testing.assert_allclose(sol.input_sequence, riccati_inputs(cm.A, cm.B, Q, R, 20 * Q, x0, Np), atol=1e-8)


def test_tracking_an_equilibrium_is_lqr_in_deviations():
    rng = np.random.default_rng(7)
    ms, cm = single(rng)
    w = weights_for(ms)
    ur = rng.normal(size=cm.q)
    xr = np.linalg.solve(np.eye(cm.n) - cm.A, cm.B @ ur)
    x0 = rng.normal(size=cm.n)
    sol = mpc_control(cm, x0, ReferenceTrajectory.constant(xr, ur, 6), w, 6)
    Q, R = w.matrices((1,))
    oracle = riccati_inputs(cm.A, cm.B, Q, R, 20 * Q, x0 - xr, 6) + ur
    np.testing.assert_allclose(sol.input_sequence, oracle, atol=1e-8)


def test_input_bounds_hold_and_cost_bookkeeping():
    rng = np.random.default_rng(8)
    ms, cm = single(rng, input_bound=0.05)
    w = weights_for(ms)
    x0 = 5 * rng.normal(size=cm.n)
    sol = mpc_control(cm, x0, ReferenceTrajectory.zeros(cm.n, cm.q, 5), w, 5)
    assert sol.solved
    assert np.all(np.abs(sol.input_sequence) <= 0.05 + 1e-9)
    xs = np.vstack([x0, sol.state_trajectory])
    Q, R = w.matrices((1,))
    pred = sum(stage_cost(xs[t], sol.input_sequence[t], 0, 0, Q, R) for t in range(5))
    assert sol.predicted_cost == pytest.approx(pred, rel=1e-10)
    assert sol.objective == pytest.approx(pred + xs[5] @ (20 * Q) @ xs[5], rel=1e-10)
    np.testing.assert_allclose(simulate_open_loop(cm, x0, sol.input_sequence), xs[:5], atol=1e-9)


def test_soft_state_bounds_are_penalized():
    m = SubsystemModel(1, [[1.0]], [[1.0]], state_box=([-1.0], [0.5]), input_box=([-0.1], [0.1]))
    ms = ModelSet([m])
    cm = aggregate_coalition(ms, (1,))
    w = weights_for(ms)
    sol = TrackingProblem(cm, w, 4).solve(np.array([2.0]), ReferenceTrajectory.zeros(1, 1, 4))
    assert sol.solved
    np.testing.assert_allclose(sol.input_sequence, -0.1, atol=1e-7)


def test_affine_term_shifts_prediction():
    rng = np.random.default_rng(9)
    ms, cm = single(rng)
    w = weights_for(ms)
    c = rng.normal(size=(3, cm.n))
    prob = TrackingProblem(cm, w, 3)
    sol = prob.solve(np.zeros(cm.n), ReferenceTrajectory.zeros(cm.n, cm.q, 3), c)
    xs = simulate_open_loop(cm, np.zeros(cm.n), np.vstack([sol.input_sequence, np.zeros(cm.q)]),
                            np.vstack([c, np.zeros(cm.n)]))
    np.testing.assert_allclose(xs[1:], sol.state_trajectory, atol=1e-9)


def test_bad_horizon_rejected():
    rng = np.random.default_rng(1)
    ms, cm = single(rng)
    with pytest.raises(ValueError):
        TrackingProblem(cm, weights_for(ms), 0)


def test_opponent_affine_shapes():
    out = opponent_affine(np.ones((2, 3)), np.zeros((2, 0)), np.ones((4, 3)), np.zeros((4, 0)), 4)
    np.testing.assert_allclose(out, 3.0)
    with pytest.raises(ValueError):
        opponent_affine(np.ones((2, 3)), np.zeros((2, 0)), np.ones((4, 2)), np.zeros((4, 0)), 4)


def test_best_response_on_decoupled_players_equals_independent_mpc():
    rng = np.random.default_rng(10)
    ms = chain_model_set(rng, 2, coupling=0.0)
    w = weights_for(ms)
    x = rng.normal(size=ms.n)
    r = ReferenceTrajectory.zeros(2, 1, 4)
    br = best_response_iteration(ms, (1,), (2,), x, r, r, w, 4)
    for P, sol in (((1,), br.first), ((2,), br.second)):
        cm = aggregate_coalition(ms, P)
        alone = mpc_control(cm, x[cm.x_index], r, w, 4)
        np.testing.assert_allclose(sol.input_sequence, alone.input_sequence, atol=1e-9)
    assert br.feasible and len(br.costs) == 3


def test_best_response_converges_toward_joint_with_weak_coupling():
    rng = np.random.default_rng(11)
    ms = chain_model_set(rng, 2, coupling=0.05)
    w = weights_for(ms)
    x = rng.normal(size=ms.n)
    r = ReferenceTrajectory.zeros(2, 1, 4)
    br = best_response_iteration(ms, (1,), (2,), x, r, r, w, 4, max_iter=10)
    a, b = br.costs[-2], br.costs[-1]
    assert abs(a[0] - b[0]) < 1e-6 and abs(a[1] - b[1]) < 1e-6


def test_best_response_rejects_overlap():
    ms = chain_model_set(np.random.default_rng(0), 2)
    r = ReferenceTrajectory.zeros(2, 1, 3)
    with pytest.raises(ValueError):
        best_response_iteration(ms, (1,), (1, 2), np.zeros(ms.n), r, r, weights_for(ms), 3)


def test_weight_matrices_cross_terms_only_inside_coalition():
    Qb = {(1, 1): np.eye(1), (2, 2): np.eye(1), (1, 2): -np.eye(1)}
    w = MpcWeights(Qb, {1: np.eye(1), 2: np.eye(1)}, 20.0, {(1, 2): 2 * np.eye(1)})
    Q1, _ = w.matrices((1,))
    Q12, _ = w.matrices((1, 2))
    np.testing.assert_allclose(Q1, [[1.0]])
    np.testing.assert_allclose(Q12, [[3.0, -0.5], [-0.5, 1.0]])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm

from coalmpc.lti import (CoalitionStructure, CommGraph, ContinuousAreaModel, ModelSet, SubsystemModel,
                         aggregate_coalition, connected_components, cross_blocks, discretize_area,
                         external_coupling, model_set_from_dict, model_set_to_dict, step_global,
                         zoh_integral)

from _builders import chain_model_set


def test_zoh_integral_matches_quadrature():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    Ad, Gamma = zoh_integral(A, 0.7)
    oracle, _ = quad_vec(lambda s: expm(A * s), 0.0, 0.7, epsabs=1e-13, epsrel=1e-13)
    np.testing.assert_allclose(Ad, expm(A * 0.7), atol=1e-12)
    np.testing.assert_allclose(Gamma, oracle, atol=1e-10)


def test_zoh_integral_singular_matrix():
    Ad, Gamma = zoh_integral(np.zeros((2, 2)), 2.0)
    np.testing.assert_allclose(Ad, np.eye(2))
    np.testing.assert_allclose(Gamma, 2.0 * np.eye(2))


def test_discretize_area_keeps_coupling_sparsity():
    A = np.array([[0.0, 1.0], [-2.0, -0.5]])
    Ac = np.array([[0.0, 0.0], [0.3, 0.0]])
    cont = ContinuousAreaModel(1, A, [[0.0], [1.0]], [[0.0], [-1.0]], {2: Ac})
    m = discretize_area(cont, 0.5)
    Acd, _ = m.couplings[2]
    assert np.all(Acd[:, 1] == 0.0)
    _, Gamma = zoh_integral(A, 0.5)
    np.testing.assert_allclose(Acd, Gamma @ Ac, atol=1e-14)
    np.testing.assert_allclose(m.B_self, Gamma @ np.array([[0.0], [1.0]]))


def test_discretize_rejects_bad_input():
    cont = ContinuousAreaModel(1, np.eye(2), np.ones((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        discretize_area(cont, 0.0)
    bad = ContinuousAreaModel(1, np.array([[np.nan, 0], [0, 1]]), np.ones((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        discretize_area(bad, 1.0)


def test_zero_couplings_are_dropped():
    m = SubsystemModel(1, np.eye(2), np.ones((2, 1)), {2: (np.zeros((2, 2)), None)})
    assert m.neighbors == frozenset()


def test_model_set_validation():
    m1 = SubsystemModel(1, np.eye(2), np.ones((2, 1)), {3: (np.ones((2, 2)), None)})
    with pytest.raises(ValueError):
        ModelSet([m1, SubsystemModel(2, np.eye(2), np.ones((2, 1)))])
    with pytest.raises(ValueError):
        ModelSet([SubsystemModel(1, np.eye(2), np.ones((2, 1))), SubsystemModel(1, np.eye(2), np.ones((2, 1)))])
    with pytest.raises(ValueError):
        SubsystemModel(1, np.eye(2), np.ones((3, 1)))


def test_grand_coalition_model_equals_global_dynamics():
    rng = np.random.default_rng(1)
    ms = chain_model_set(rng, 4)
    cm = aggregate_coalition(ms, ms.ids)
    A, B, _ = ms.global_matrices()
    np.testing.assert_array_equal(cm.A, A)
    np.testing.assert_array_equal(cm.B, B)
    assert cm.external_neighbors == frozenset()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), members=st.sets(st.integers(1, 4), min_size=1, max_size=3))
def test_coalition_prediction_plus_external_term_is_exact(seed, members):
    rng = np.random.default_rng(seed)
    ms = chain_model_set(rng, 4)
    cm = aggregate_coalition(ms, members)
    x, u = rng.normal(size=ms.n), rng.normal(size=ms.q)
    xn = step_global(ms, x, u)
    w = external_coupling(ms, cm, x, u)
    np.testing.assert_allclose(cm.A @ x[cm.x_index] + cm.B @ u[cm.u_index] + w, xn[cm.x_index], atol=1e-12)


def test_cross_blocks_shapes():
    ms = chain_model_set(np.random.default_rng(2), 3)
    A12, B12 = cross_blocks(ms, (1,), (2, 3))
    assert A12.shape == (2, 4) and B12.shape == (2, 2)
    assert np.all(A12[:, 2:] == 0)


def test_step_global_dimension_checks():
    ms = chain_model_set(np.random.default_rng(3), 2)
    with pytest.raises(ValueError):
        step_global(ms, np.zeros(3), np.zeros(2))


def test_coalition_structure_operations():
    st_ = CoalitionStructure([(3,), (1,), (2,)])
    assert st_.coalitions == ((1,), (2,), (3,))
    merged = st_.merge((1,), (3,))
    assert merged.coalitions == ((1, 3), (2,))
    assert merged.coalition_of(3) == (1, 3)
    split = merged.replace((1, 3), [(1,), (3,)])
    assert split == st_
    assert merged.is_partition_of({1, 2, 3})
    with pytest.raises(ValueError):
        CoalitionStructure([(1, 2), (2, 3)])
    with pytest.raises(ValueError):
        st_.merge((1,), (1, 2))


def test_connected_components_round_trip():
    st_ = CoalitionStructure([(1, 4), (2,), (3, 5, 6)])
    assert connected_components(st_.to_graph()) == st_
    g = CommGraph({1, 2, 3}, [(1, 2)])
    assert g.has_edge(2, 1) and not g.has_edge(1, 3)
    with pytest.raises(ValueError):
        CommGraph({1, 2}, [(1, 1)])


def test_model_set_dict_round_trip():
    rng = np.random.default_rng(4)
    ms = chain_model_set(rng, 3, input_bound=0.5)
    back = model_set_from_dict(model_set_to_dict(ms))
    for a, b in zip(ms.global_matrices(), back.global_matrices()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back[2].input_box[1], ms[2].input_box[1])
    assert np.all(np.isinf(back[2].state_box[0]))

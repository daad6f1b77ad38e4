import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from satconsensus.disagreement import (build_disagreement_system, check_sector_condition, dead_zone,
                                       from_disagreement, in_sector_set, saturate, sector_value,
                                       selectors, to_disagreement)
from satconsensus.errors import MissingGainError

finite = st.floats(-50, 50, allow_nan=False)


def full_network_rhs(model, x, mode, w):
    """Direct evaluation of x_i' = A x_i + B sat(K sum_j a_ij (x_j - x_i)) + D w_i."""
    d = model.dynamics
    N, m = model.n_agents, d.m
    X = x.reshape(N, m)
    Wd = w.reshape(N, d.q)
    adj = model.modes[mode].adjacency
    out = np.empty_like(X)
    for i in range(N):
        u = model.K @ sum(adj[i, j] * (X[j] - X[i]) for j in range(N))
        out[i] = d.A @ X[i] + d.B @ np.clip(u, -d.u_max, d.u_max) + d.D @ Wd[i]
    return out.ravel()


def test_selector_identities():
    U, W = selectors(4)
    np.testing.assert_array_equal(U @ W, np.eye(3))
    np.testing.assert_array_equal(U @ np.ones(4), 0)


def test_coordinate_roundtrip(rng):
    x = rng.standard_normal(6)
    z = to_disagreement(x, 3)
    np.testing.assert_allclose(z, [x[0] - x[2], x[1] - x[3], x[0] - x[4], x[1] - x[5]])
    np.testing.assert_allclose(from_disagreement(z, x[:2]), x)


def test_example_matrices(example1_system):
    s = example1_system
    assert (s.n_z, s.n_u, s.n_w, s.n_modes) == (4, 6, 6, 3)
    np.testing.assert_allclose(s.drift[1], np.kron(np.eye(2), [[0.1, -0.1], [0.1, -3.0]]))


def test_missing_gain(example1_nogain):
    with pytest.raises(MissingGainError):
        build_disagreement_system(example1_nogain)


def test_reduction_matches_full_network(example1, example1_system, rng):
    s = example1_system
    Ux = np.kron(s.U, np.eye(2))
    for _ in range(50):
        x = rng.standard_normal(6) * rng.choice([0.1, 1, 20])
        w = rng.standard_normal(6)
        z = Ux @ x
        for mode in range(3):
            expected = Ux @ full_network_rhs(example1, x, mode, w)
            np.testing.assert_allclose(s.rhs_saturated(z, mode, w), expected, atol=1e-9)
            np.testing.assert_allclose(s.rhs_sector(z, mode, w), expected, atol=1e-9)


def test_dead_zone_example():
    np.testing.assert_allclose(dead_zone([5.0, -4.0, 1.0], 3.0), [2.0, -1.0, 0.0])
    np.testing.assert_allclose(saturate([5.0, -4.0, 1.0], 3.0), [3.0, -3.0, 1.0])


def test_sector_example_point():
    # u = 5, aux = 2.5, u_max = 3: |u - aux| = 2.5 lies inside the sector set
    assert in_sector_set([5.0], [2.5], 3.0)
    assert sector_value([5.0], [2.5], [[1.0]], 3.0) == pytest.approx(2.0 * (2.0 - 2.5))
    assert check_sector_condition([5.0], [2.5], [[1.0]], 3.0)
    assert not in_sector_set([5.0], [1.5], 3.0)


def test_sector_rejects_non_diagonal_T():
    with pytest.raises(ValueError):
        sector_value([1.0, 2.0], [0.0, 0.0], [[1.0, 0.1], [0.1, 1.0]], 1.0)
    with pytest.raises(ValueError):
        sector_value([1.0], [0.0], [[-1.0]], 1.0)


@settings(max_examples=300, deadline=None)
@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite),
       arrays(float, 4, elements=st.floats(0.01, 10)), st.floats(0.1, 10))
def test_sector_condition_holds_on_set(u, aux, t, u_max):
    if not in_sector_set(u, aux, u_max):
        aux = u - np.clip(u - aux, -u_max, u_max)
    assert sector_value(u, aux, np.diag(t), u_max) <= 1e-9


def test_worked_coordinates():
    np.testing.assert_allclose(to_disagreement([1.0, 2.0, 3.0], 3), [-1.0, -2.0])
    np.testing.assert_allclose(from_disagreement([-1.0, -2.0], [1.0]), [1.0, 2.0, 3.0])
    c = np.array([0.3, -1.2])
    np.testing.assert_allclose(to_disagreement(np.tile(c, 4), 4), 0)
    np.testing.assert_allclose(from_disagreement(np.zeros(6), c), np.tile(c, 4))


def test_coordinates_blockwise_oracle(rng):
    for _ in range(20):
        x = rng.standard_normal(6)
        blocks = x.reshape(3, 2)
        expected = np.concatenate([blocks[0] - blocks[i] for i in (1, 2)])
        np.testing.assert_allclose(to_disagreement(x, 3), expected)
        z, x1 = rng.standard_normal(4), rng.standard_normal(2)
        np.testing.assert_allclose(to_disagreement(from_disagreement(z, x1), 3), z)


@settings(max_examples=100, deadline=None)
@given(arrays(float, 5, elements=finite), st.floats(0.1, 10))
def test_saturation_identities(u, u_max):
    np.testing.assert_allclose(saturate(-u, u_max), -saturate(u, u_max))
    np.testing.assert_allclose(dead_zone(u, u_max) + saturate(u, u_max), u)
    inner = np.clip(u, -u_max, u_max)
    np.testing.assert_array_equal(saturate(inner, u_max), inner)
    np.testing.assert_array_equal(dead_zone(inner, u_max), 0)


def test_dead_zone_scalar_and_interior_sector():
    assert dead_zone(5.0, 3.0) == pytest.approx(2.0)
    assert sector_value([1.0, -2.0], [3.0, 0.5], np.eye(2), 3.0) == 0.0


def test_linkless_mode(example1_system):
    s = example1_system
    np.testing.assert_array_equal(s.drift[1], s.open_drift)
    np.testing.assert_array_equal(s.feedback_rows[1], 0)

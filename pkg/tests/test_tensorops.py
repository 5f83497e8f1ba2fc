"""Quadruple-loop oracles for the squared-difference tensor contractions."""

import numpy as np
import pytest

from baryfuse.tensorops import frobenius_loss_tensor_apply, sq_loss_tensor_apply


def sq_oracle(A, B, Pi):
    j_n, q_n = A.shape
    g_n, s_n = B.shape
    out = np.zeros((j_n, g_n))
    for j in range(j_n):
        for g in range(g_n):
            acc = 0.0
            for q in range(q_n):
                for s in range(s_n):
                    acc += (A[j, q] - B[g, s]) ** 2 * Pi[q, s]
            out[j, g] = acc
    return out


def frob_oracle(A, B, Pi):
    j_n, q_n = A.shape[:2]
    g_n, s_n = B.shape[:2]
    out = np.zeros((j_n, g_n))
    for j in range(j_n):
        for g in range(g_n):
            acc = 0.0
            for q in range(q_n):
                for s in range(s_n):
                    acc += np.sum((A[j, q] - B[g, s]) ** 2) * Pi[q, s]
            out[j, g] = acc
    return out


def random_instance(rng, filters=False):
    j, q, g, s = rng.integers(1, 13, size=4)
    if filters:
        k = int(rng.integers(1, 4))
        A = rng.standard_normal((j, q, k, k))
        B = rng.standard_normal((g, s, k, k))
    else:
        A = rng.standard_normal((j, q))
        B = rng.standard_normal((g, s))
    Pi = rng.uniform(0.0, 1.0, size=(q, s))
    return A, B, Pi


def test_sq_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(40):
        A, B, Pi = random_instance(rng)
        np.testing.assert_allclose(
            sq_loss_tensor_apply(A, B, Pi), sq_oracle(A, B, Pi), rtol=1e-10
        )


def test_frobenius_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(40):
        A, B, Pi = random_instance(rng, filters=True)
        np.testing.assert_allclose(
            frobenius_loss_tensor_apply(A, B, Pi), frob_oracle(A, B, Pi), rtol=1e-10
        )


def test_scalar_case():
    out = sq_loss_tensor_apply([[3.0]], [[1.0]], [[0.5]])
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(0.5 * 4.0, abs=1e-15)


def test_identity_coupling_diagonal_zero():
    # with Pi = I/n and B = A, M[j, j] = mean_q (A[j,q]-A[j,q])^2 = 0
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 6))
    M = sq_loss_tensor_apply(A, A, np.eye(6) / 6)
    np.testing.assert_allclose(np.diag(M), 0.0, atol=1e-12)


def test_nonnegative_output():
    rng = np.random.default_rng(2)
    for _ in range(20):
        A, B, Pi = random_instance(rng)
        assert np.all(sq_loss_tensor_apply(A, B, Pi) >= 0.0)


def test_frobenius_reduces_to_sq_for_1x1_filters():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 5, 1, 1))
    B = rng.standard_normal((3, 6, 1, 1))
    Pi = rng.uniform(size=(5, 6))
    np.testing.assert_allclose(
        frobenius_loss_tensor_apply(A, B, Pi),
        sq_loss_tensor_apply(A[..., 0, 0], B[..., 0, 0], Pi),
        rtol=1e-12,
    )


def test_shape_errors():
    with pytest.raises(ValueError):
        sq_loss_tensor_apply(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        sq_loss_tensor_apply(np.zeros(3), np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        frobenius_loss_tensor_apply(
            np.zeros((2, 3, 2, 2)), np.zeros((2, 3, 3, 3)), np.zeros((3, 3))
        )

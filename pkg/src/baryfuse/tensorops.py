"""Dense matrix primitives shared by every fusion objective.

The central object is the contraction of a four-index squared-difference
tensor L[j, g, q, s] = (A[j, q] - B[g, s])**2 against a coupling Pi[q, s].
Expanding the square turns the naive O(j*g*q*s) sum into three matrix
products, which is what makes layer-wise fusion cheap.
"""

import numpy as np

__all__ = ["sq_loss_tensor_apply", "frobenius_loss_tensor_apply"]


def _as_matrix(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {x.shape}")
    return x


def sq_loss_tensor_apply(A, B, Pi):
    """Contract the squared-difference tensor of A and B against Pi.

    Returns the j x g matrix M with
        M[j, g] = sum_{q, s} (A[j, q] - B[g, s])**2 * Pi[q, s]
    computed via the expansion
        M = (A*A) @ r  +  ((B*B) @ c)^T  -  2 * A @ Pi @ B^T
    with r = Pi @ 1 and c = Pi^T @ 1.

    A: (j, q), B: (g, s), Pi: (q, s) with nonnegative entries.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    Pi = _as_matrix(Pi, "Pi")
    if Pi.shape != (A.shape[1], B.shape[1]):
        raise ValueError(
            f"Pi shape {Pi.shape} does not match A cols {A.shape[1]} x B cols {B.shape[1]}"
        )
    r = Pi.sum(axis=1)
    c = Pi.sum(axis=0)
    out = (A * A) @ r
    out = out[:, None] + ((B * B) @ c)[None, :]
    out -= 2.0 * (A @ Pi @ B.T)
    # exact value is a sum of squares; round-off can leave tiny negatives
    return np.maximum(out, 0.0)


def frobenius_loss_tensor_apply(A, B, Pi):
    """Same contraction with k x k filters in place of scalar weights.

    A: (j, q, k, k), B: (g, s, k, k), Pi: (q, s). The scalar squared
    difference becomes the squared Frobenius norm of the filter difference,
    i.e. the contraction of the flattened filters summed over the k*k axis.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    Pi = _as_matrix(Pi, "Pi")
    if A.ndim != 4 or B.ndim != 4:
        raise ValueError(f"filter banks must be 4-d, got {A.shape} and {B.shape}")
    if A.shape[2:] != B.shape[2:]:
        raise ValueError(f"filter sizes differ: {A.shape[2:]} vs {B.shape[2:]}")
    if Pi.shape != (A.shape[1], B.shape[1]):
        raise ValueError(
            f"Pi shape {Pi.shape} does not match A axis1 {A.shape[1]} x B axis1 {B.shape[1]}"
        )
    j, q = A.shape[:2]
    g, s = B.shape[:2]
    Af = A.reshape(j, q, -1)
    Bf = B.reshape(g, s, -1)
    r = Pi.sum(axis=1)
    c = Pi.sum(axis=0)
    out = np.einsum("jqf,q->j", Af * Af, r)[:, None]
    out = out + np.einsum("gsf,s->g", Bf * Bf, c)[None, :]
    # cross term: sum over the filter axis of A_f @ Pi @ B_f^T
    cross = np.einsum("jqf,qs,gsf->jg", Af, Pi, Bf, optimize=True)
    out -= 2.0 * cross
    return np.maximum(out, 0.0)

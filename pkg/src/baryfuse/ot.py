"""Entropic optimal transport solvers.

Two entry points: `sinkhorn` for plain entropic OT and `entropic_gw_solve`
for the Gromov-Wasserstein fixed point, which repeatedly linearizes the
quadratic GW term and calls Sinkhorn on the resulting cost.

Costs are max-normalized before solving (divide by the largest entry when it
is positive) so one epsilon works across layers of very different weight
scales; reported objectives are scaled back to original cost units, which
means they correspond to an effective regularization of epsilon * max(C).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensorops import sq_loss_tensor_apply

__all__ = [
    "SinkhornParams",
    "Coupling",
    "SinkhornUnderflowError",
    "uniform_hist",
    "sinkhorn",
    "entropic_gw_solve",
]

# below this epsilon the Gibbs kernel exp(-C/eps) underflows for normalized
# costs, so the log-domain path is picked automatically
LOG_DOMAIN_EPS_CUTOFF = 5e-3


class SinkhornUnderflowError(ArithmeticError):
    """Gibbs kernel underflowed in plain-domain mode; use log_domain=True."""


@dataclass
class SinkhornParams:
    """Solver knobs.

    log_domain=None picks the log-domain path automatically for
    epsilon <= 5e-3; an explicit bool forces one mode.
    tol is the stopping threshold on the max marginal l1 violation.
    """

    epsilon: float = 5e-3
    max_iter: int = 2000
    tol: float = 1e-9
    log_domain: Optional[bool] = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")

    def resolved_log_domain(self) -> bool:
        if self.log_domain is None:
            return self.epsilon <= LOG_DOMAIN_EPS_CUTOFF
        return self.log_domain


@dataclass
class Coupling:
    """Transport plan with its prescribed marginals and solve diagnostics."""

    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    violation: float
    converged: bool
    iterations: int

    @property
    def shape(self):
        return self.matrix.shape


def uniform_hist(n: int) -> np.ndarray:
    """Uniform histogram with n bins."""
    if n < 1:
        raise ValueError("histogram needs at least one bin")
    return np.full(n, 1.0 / n)


def _check_hist(h, n, name):
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {h.shape}")
    if np.any(h < 0):
        raise ValueError(f"{name} has negative entries")
    if abs(h.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1, got {h.sum()!r}")
    return h


def _marginal_violation(Pi, p, q) -> float:
    return max(
        float(np.abs(Pi.sum(axis=1) - p).sum()),
        float(np.abs(Pi.sum(axis=0) - q).sum()),
    )


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _lse(M, axis):
    # logsumexp that keeps all-(-inf) slices at -inf instead of nan
    m = M.max(axis=axis)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(M - np.expand_dims(m_safe, axis)).sum(axis=axis)) + m_safe
    return np.where(np.isfinite(m), out, -np.inf)


def _entropy(Pi) -> float:
    # H(Pi) = -sum Pi (log Pi - 1), with 0 log 0 = 0
    pos = Pi[Pi > 0]
    return float(-(pos * (np.log(pos) - 1.0)).sum())


def _dual_value(u, v, Pi_mass, p, q, eps) -> float:
    # potentials are log scalings; entries with zero marginal mass carry -inf
    # potentials and contribute nothing
    up = float(np.where(p > 0, u * p, 0.0).sum())
    vq = float(np.where(q > 0, v * q, 0.0).sum())
    return eps * (up + vq - Pi_mass)


def _emit(trace_sink, iteration, primal, dual, violation):
    if trace_sink is None:
        return
    if isinstance(trace_sink, list):
        trace_sink.append((iteration, primal, dual, violation))
    else:
        trace_sink.write(f"{iteration}\t{primal:.17g}\t{dual:.17g}\t{violation:.17g}\n")


def sinkhorn(C, p, q, params: SinkhornParams, trace_sink=None) -> Coupling:
    """Solve entropic OT: min <C, Pi> - eps * H(Pi) over couplings of (p, q).

    Returns diag(a) K diag(b) with K = exp(-C/eps), iterated until the max
    marginal l1 violation is <= params.tol or params.max_iter is reached.

    trace_sink: None, a list (tuples are appended), or a file-like object
    (tab-separated lines are written). Each record holds iteration index,
    primal objective, dual objective, and marginal violation; objectives are
    reported in original (de-normalized) cost units. The dual objective is
    non-decreasing across iterations; the primal objective is not monotone
    in general.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n1, n2 = C.shape
    p = _check_hist(p, n1, "p")
    q = _check_hist(q, n2, "q")

    cmax = float(C.max()) if C.size else 0.0
    scale = cmax if cmax > 0 else 1.0
    Cn = C / scale
    eps = params.epsilon

    if params.resolved_log_domain():
        Pi, u, v, viol, it, conv = _sinkhorn_log(
            Cn, p, q, eps, params, scale, trace_sink
        )
    else:
        Pi, u, v, viol, it, conv = _sinkhorn_plain(
            Cn, p, q, eps, params, scale, trace_sink
        )
    return Coupling(Pi, p, q, viol, conv, it)


def _trace_state(Cn, Pi, u, v, p, q, eps, scale, trace_sink, it):
    if trace_sink is None:
        return
    primal = scale * (float((Cn * Pi).sum()) - eps * _entropy(Pi))
    dual = scale * _dual_value(u, v, float(Pi.sum()), p, q, eps)
    viol = _marginal_violation(Pi, p, q)
    _emit(trace_sink, it, primal, dual, viol)


def _sinkhorn_log(Cn, p, q, eps, params, scale, trace_sink):
    M = -Cn / eps
    logp = _safe_log(p)
    logq = _safe_log(q)
    u = np.zeros_like(p)
    v = np.zeros_like(q)
    viol = np.inf
    it = 0
    converged = False
    for it in range(1, params.max_iter + 1):
        u = logp - _lse(M + v[None, :], axis=1)
        v = logq - _lse(M + u[:, None], axis=0)
        Pi = np.exp(u[:, None] + M + v[None, :])
        viol = _marginal_violation(Pi, p, q)
        _trace_state(Cn, Pi, u, v, p, q, eps, scale, trace_sink, it)
        if viol <= params.tol:
            converged = True
            break
    return Pi, u, v, viol, it, converged


def _sinkhorn_plain(Cn, p, q, eps, params, scale, trace_sink):
    with np.errstate(under="ignore"):
        K = np.exp(-Cn / eps)
    if np.any(K.sum(axis=1) == 0.0) or np.any(K.sum(axis=0) == 0.0):
        raise SinkhornUnderflowError(
            "Gibbs kernel exp(-C/eps) underflowed to an empty row or column; "
            "rerun with log_domain=True (or leave log_domain unset)"
        )
    b = np.ones_like(q)
    viol = np.inf
    it = 0
    converged = False
    for it in range(1, params.max_iter + 1):
        Kb = K @ b
        if np.any((Kb == 0.0) & (p > 0)):
            raise SinkhornUnderflowError(
                "scaling vector underflowed in plain-domain Sinkhorn; "
                "rerun with log_domain=True"
            )
        a = np.where(p > 0, p / np.where(Kb > 0, Kb, 1.0), 0.0)
        KTa = K.T @ a
        if np.any((KTa == 0.0) & (q > 0)):
            raise SinkhornUnderflowError(
                "scaling vector underflowed in plain-domain Sinkhorn; "
                "rerun with log_domain=True"
            )
        b = np.where(q > 0, q / np.where(KTa > 0, KTa, 1.0), 0.0)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise SinkhornUnderflowError(
                "non-finite scaling vector in plain-domain Sinkhorn; "
                "rerun with log_domain=True"
            )
        Pi = a[:, None] * K * b[None, :]
        viol = _marginal_violation(Pi, p, q)
        if trace_sink is not None:
            u = _safe_log(a)
            v = _safe_log(b)
            _trace_state(Cn, Pi, u, v, p, q, eps, scale, trace_sink, it)
        if viol <= params.tol:
            converged = True
            break
    return Pi, _safe_log(a), _safe_log(b), viol, it, converged


def gw_iterate_pairs(
    fixed_cost,
    sim_pairs,
    p,
    q,
    alpha: float,
    params: SinkhornParams,
    inner_max: int = 10,
    trace_sink=None,
) -> Coupling:
    """Fixed-point iteration for a fused GW objective with several sim pairs.

    Starting from the product coupling p q^T, repeat
        Pi <- sinkhorn(fixed_cost + alpha * sum_k L(sim_A_k, sim_B_k) (x) Pi)
    until the coupling changes by <= params.tol in l1 or inner_max is hit.
    Used directly by LSTM fusion, where the cost sums over the four gates.
    """
    fixed_cost = np.asarray(fixed_cost, dtype=np.float64)
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    n1, n2 = fixed_cost.shape
    p = _check_hist(p, n1, "p")
    q = _check_hist(q, n2, "q")
    for A, B in sim_pairs:
        A = np.asarray(A)
        B = np.asarray(B)
        if A.shape != (n1, n1) or B.shape != (n2, n2):
            raise ValueError(
                f"sim matrices must be square of sizes {n1} and {n2}, "
                f"got {A.shape} and {B.shape}"
            )
    Pi = np.outer(p, q)
    result = None
    converged = False
    outer = 0
    for outer in range(1, inner_max + 1):
        cost = fixed_cost.copy()
        for A, B in sim_pairs:
            cost += alpha * sq_loss_tensor_apply(A, B, Pi)
        result = sinkhorn(cost, p, q, params, trace_sink=trace_sink)
        change = float(np.abs(result.matrix - Pi).sum())
        Pi = result.matrix
        if change <= params.tol:
            converged = True
            break
    return Coupling(Pi, p, q, result.violation, converged and result.converged, outer)


def entropic_gw_solve(
    fixed_cost,
    sim_A,
    sim_B,
    p,
    q,
    alpha: float,
    params: SinkhornParams,
    inner_max: int = 10,
    trace_sink=None,
) -> Coupling:
    """Entropic Gromov-Wasserstein fixed point with a linear cost offset.

    Minimizes <fixed_cost, Pi> + alpha * <L(sim_A, sim_B) (x) Pi, Pi> plus
    entropy, by iterating Pi <- sinkhorn(fixed_cost + alpha * L (x) Pi, p, q)
    from the product coupling. alpha = 0 reduces to a single Sinkhorn solve
    on fixed_cost. Non-convergence within inner_max returns the last iterate
    with converged=False.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0.0:
        return sinkhorn(fixed_cost, p, q, params, trace_sink=trace_sink)
    return gw_iterate_pairs(
        fixed_cost, [(sim_A, sim_B)], p, q, alpha, params, inner_max, trace_sink
    )

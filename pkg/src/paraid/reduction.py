"""POD, hierarchical approximate POD and the basis enrichment policies.

All bases are orthonormal with respect to a user supplied Gram matrix ``M``
(sparse or dense).  ``pod`` and ``hapod`` guarantee that the sum of squared
M-norm projection errors of the snapshots stays strictly below ``eps**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SolverError

__all__ = [
    "pod",
    "hapod",
    "orthogonalize_extend",
    "projection_error_sq",
    "Bases",
    "init_bases",
    "enrich_after_acceptance",
    "enrich_on_failure",
    "FAILURE_KINDS",
]

DEFLATION_TOL = 1e-10
EPS_FACTOR = 10.0
MAX_FAILURE_RETRIES = 10
FAILURE_KINDS = ("not-in-tr", "agc-decay")


def _columns(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _weighted_qr(x: np.ndarray, M, drop_sq: float):
    """Two-pass Gram-Schmidt in the M inner product.

    Columns whose residual squared norm falls below ``drop_sq`` are not
    added to ``Q``; the discarded energy is returned so the caller can
    budget it against the POD tolerance.
    """
    n, m = x.shape
    q = np.zeros((n, m))
    mq = np.zeros((n, m))
    r = np.zeros((m, m))
    dropped = 0.0
    rank = 0
    for j in range(m):
        v = x[:, j].copy()
        coef = np.zeros(m)
        for _ in range(2):
            c = mq[:, :rank].T @ v
            v -= q[:, :rank] @ c
            coef[:rank] += c
        mv = M @ v
        nrm_sq = float(v @ mv)
        if nrm_sq <= drop_sq or nrm_sq <= 0.0:
            dropped += max(nrm_sq, 0.0)
            r[:, j] = coef
            continue
        nrm = np.sqrt(nrm_sq)
        q[:, rank] = v / nrm
        mq[:, rank] = mv / nrm
        coef[rank] = nrm
        r[:, j] = coef
        rank += 1
    return q[:, :rank], r[:rank], dropped


def _pod(x: np.ndarray, M, eps: float):
    """Modes and singular values of a POD truncated at absolute tolerance ``eps``."""
    if not eps > 0:
        raise ValueError("POD tolerance must be positive")
    x = _columns(x)
    n, m = x.shape
    if m == 0 or not np.any(x):
        return np.zeros((n, 0)), np.zeros(0)
    if not np.all(np.isfinite(x)):
        raise ValueError("snapshots contain non-finite entries")
    budget = eps * eps
    q, r, dropped = _weighted_qr(x, M, 0.25 * budget / m)
    if q.shape[1] == 0:
        return np.zeros((n, 0)), np.zeros(0)
    u, s, _ = np.linalg.svd(r, full_matrices=False)
    tail = np.concatenate([np.cumsum((s ** 2)[::-1])[::-1], [0.0]])
    rank = int(np.argmax(tail + dropped < budget))
    modes = q @ u[:, :rank]
    return modes, s[:rank]


def pod(snapshots, M, eps: float) -> np.ndarray:
    """M-orthonormal POD modes with ``sum_e ||e - P e||_M^2 < eps**2``.

    The snapshot matrix is first factorised as ``X = Q R`` with an
    M-orthonormal ``Q``, and the SVD of the small factor ``R`` yields the
    modes.  This stays accurate below the square-root-of-roundoff floor of the
    method of snapshots.
    """
    return _pod(snapshots, M, eps)[0]


def hapod(chunks, M, eps: float) -> np.ndarray:
    """Two-level hierarchical POD with the same total error guarantee as :func:`pod`.

    Each leaf ``i`` with ``m_i`` snapshots is compressed at ``(eps/2) sqrt(m_i/m)``
    and the singular-value-weighted leaf modes are compressed again at
    ``eps/2``; the triangle inequality bounds the total error by ``eps``.
    """
    chunks = [_columns(c) for c in chunks]
    chunks = [c for c in chunks if c.shape[1] > 0]
    if not chunks:
        raise ValueError("no snapshots given")
    if len(chunks) == 1:
        return pod(chunks[0], M, eps)
    m = sum(c.shape[1] for c in chunks)
    scaled = []
    for c in chunks:
        modes, s = _pod(c, M, 0.5 * eps * np.sqrt(c.shape[1] / m))
        scaled.append(modes * s)
    return pod(np.hstack(scaled), M, 0.5 * eps)


def projection_error_sq(snapshots, modes, M) -> float:
    """``sum_e ||e - P e||_M^2`` for the M-orthogonal projector onto ``span(modes)``."""
    x = _columns(snapshots)
    res = x - modes @ (modes.T @ (M @ x))
    return float(np.sum(res * (M @ res)))


def orthogonalize_extend(basis, new_vectors, M, deflation_tol: float = DEFLATION_TOL) -> np.ndarray:
    """Append the M-orthonormalised ``new_vectors`` to ``basis``.

    Existing columns are kept unchanged.  A vector is dropped when its norm
    after projection falls below ``deflation_tol`` times its original norm.
    """
    basis = _columns(basis)
    new = _columns(new_vectors)
    n, k0 = basis.shape
    out = np.zeros((n, k0 + new.shape[1]))
    mout = np.zeros_like(out)
    out[:, :k0] = basis
    if k0:
        mout[:, :k0] = M @ basis
    k = k0
    for j in range(new.shape[1]):
        v = new[:, j].copy()
        norm0 = np.sqrt(max(float(v @ (M @ v)), 0.0))
        if norm0 == 0.0 or not np.isfinite(norm0):
            continue
        for _ in range(2):
            v -= out[:, :k] @ (mout[:, :k].T @ v)
        mv = M @ v
        nrm = np.sqrt(max(float(v @ mv), 0.0))
        if nrm <= deflation_tol * norm0:
            continue
        out[:, k] = v / nrm
        mout[:, k] = mv / nrm
        k += 1
    return out[:, :k].copy()


# ---- enrichment policies --------------------------------------------------------------------
@dataclass
class Bases:
    """Current reduced bases plus the bookkeeping needed by the trust-region driver."""

    psi_q: np.ndarray
    psi_v: np.ndarray
    eps: float
    init_q: int = 0
    eps_trace: list = field(default_factory=list)

    @property
    def n_q(self) -> int:
        return self.psi_q.shape[1]

    @property
    def n_v(self) -> int:
        return self.psi_v.shape[1]


def _state_modes(problem, evaluation, eps: float) -> np.ndarray:
    return hapod([evaluation.u, evaluation.p], problem.h1_state, eps)


def init_bases(problem, q0, obs, eps: float, q_circ=None, evaluation=None) -> tuple[Bases, object]:
    """Initial bases from the snapshots at ``q0``.

    ``q0`` enters the parameter basis verbatim before the POD modes of
    ``{q_circ, q0, grad J_h(q0)}`` so that it is exactly representable.
    Returns the bases and the full-order evaluation at ``q0``.
    """
    q0 = problem._as_parameter(q0)
    q_circ = q0 if q_circ is None else problem._as_parameter(q_circ)
    if evaluation is None:
        evaluation = problem.evaluate(q0, obs)
    mq = problem.param_gram
    psi_q = orthogonalize_extend(np.zeros((problem.n, 0)), q0, mq)
    modes = hapod([q_circ, q0, evaluation.gradient], mq, eps)
    psi_q = orthogonalize_extend(psi_q, modes, mq)
    psi_v = orthogonalize_extend(np.zeros((problem.n, 0)), _state_modes(problem, evaluation, eps), problem.h1_state)
    return Bases(psi_q, psi_v, eps, init_q=psi_q.shape[1], eps_trace=[eps]), evaluation


def enrich_after_acceptance(problem, bases: Bases, q_new, evaluation) -> Bases:
    """Extend both bases with the snapshots at an accepted iterate.

    Stationary parameters append the single gradient directly; time dependent
    ones add the POD modes of the ``K`` gradient columns.  ``q_new`` is always
    appended afterwards so it stays representable.
    """
    mq = problem.param_gram
    q_new = problem._as_parameter(q_new)
    grad = evaluation.gradient
    new_q = grad if grad.shape[1] == 1 else hapod([grad], mq, bases.eps)
    psi_q = orthogonalize_extend(bases.psi_q, np.hstack([new_q, q_new]), mq)
    psi_v = orthogonalize_extend(bases.psi_v, _state_modes(problem, evaluation, bases.eps), problem.h1_state)
    return replace(bases, psi_q=psi_q, psi_v=psi_v, eps_trace=bases.eps_trace + [bases.eps])


def enrich_on_failure(problem, bases: Bases, kind: str, q, evaluation, attempt: int) -> Bases:
    """Re-enrich after a failed trust-region precondition with tolerance ``eps / 10**attempt``.

    ``not-in-tr`` adds ``{q, u_h(q), p_h(q)}``; ``agc-decay`` adds
    ``{grad J_h(q), u_h(q), p_h(q)}``.  ``evaluation`` must hold the full-order
    quantities at ``q``.
    """
    if kind not in FAILURE_KINDS:
        raise ValueError(f"unknown failure kind {kind!r}")
    if attempt < 1:
        raise ValueError("attempt counts from 1")
    if attempt > MAX_FAILURE_RETRIES:
        raise SolverError(
            f"failure enrichment ({kind}) exceeded {MAX_FAILURE_RETRIES} retries; "
            f"n_Q={bases.n_q}, n_V={bases.n_v}, eps trace={bases.eps_trace}"
        )
    eps = bases.eps / EPS_FACTOR ** attempt
    mq = problem.param_gram
    snaps = problem._as_parameter(q) if kind == "not-in-tr" else evaluation.gradient
    psi_q = orthogonalize_extend(bases.psi_q, hapod([snaps], mq, eps), mq)
    psi_v = orthogonalize_extend(bases.psi_v, _state_modes(problem, evaluation, eps), problem.h1_state)
    return replace(bases, psi_q=psi_q, psi_v=psi_v, eps_trace=bases.eps_trace + [eps])

"""Residual-based a posteriori bounds for the reduced objective.

Residuals are evaluated with the full-order operators (matrix-vector products
only) and measured in the dual norm of ``V_h`` through one sparse factorisation
of ``M_V``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fom import FomProblem, Observation

__all__ = [
    "dual_norms_sq",
    "primal_residual",
    "adjoint_residual",
    "delta_pr",
    "delta_J",
    "relative_indicator",
    "Estimate",
    "estimate",
]


def dual_norms_sq(problem: FomProblem, residuals: np.ndarray) -> np.ndarray:
    """``r^T M_V^{-1} r`` for every column of ``residuals``."""
    r = np.asarray(residuals, dtype=float)
    z = problem.h1_state_lu.solve(r)
    return np.maximum(np.sum(r * z, axis=0), 0.0)


def _diff_back(u: np.ndarray) -> np.ndarray:
    prev = np.zeros_like(u)
    prev[:, 1:] = u[:, :-1]
    return u - prev


def _diff_forward(p: np.ndarray) -> np.ndarray:
    nxt = np.zeros_like(p)
    nxt[:, :-1] = p[:, 1:]
    return p - nxt


def _apply_A(problem: FomProblem, q, u) -> np.ndarray:
    q = problem._as_parameter(q)
    if q.shape[1] == 1:
        return problem.affine.evaluate(q[:, 0]) @ u
    return problem.affine.apply(q, u)


def primal_residual_vectors(problem: FomProblem, q, u) -> np.ndarray:
    return problem.source - _apply_A(problem, q, u) - problem.mass_state @ _diff_back(u) / problem.dt


def adjoint_residual_vectors(problem: FomProblem, q, u, p, obs: Observation) -> np.ndarray:
    # A(q) is symmetric for both kinds, so A(q)^T p = A(q) p
    return (problem.residual_forcing(u, obs) - _apply_A(problem, q, p)
            - problem.mass_state @ _diff_forward(p) / problem.dt)


def primal_residual(problem: FomProblem, q, u) -> np.ndarray:
    """Squared dual norms of ``L^k - A(q^k) u^k - M_H (u^k - u^{k-1}) / dt``."""
    return dual_norms_sq(problem, primal_residual_vectors(problem, q, u))


def adjoint_residual(problem: FomProblem, q, u, p, obs: Observation) -> np.ndarray:
    """Squared dual norms of ``Cy^k - C u^k - A(q^k)^T p^k - M_H (p^k - p^{k+1}) / dt``."""
    return dual_norms_sq(problem, adjoint_residual_vectors(problem, q, u, p, obs))


def delta_pr(problem: FomProblem, q, u, coercivity: float | None = None) -> float:
    a = problem.coercivity_constant(q) if coercivity is None else coercivity
    return float(np.sqrt(problem.dt * np.sum(primal_residual(problem, q, u)) / a))


def _delta_J(problem, res_pr, res_ad, a) -> tuple[float, float]:
    dpr = float(np.sqrt(problem.dt * np.sum(res_pr) / a))
    dad = float(np.sqrt(problem.dt * np.sum(res_ad)))
    dj = dad * dpr / np.sqrt(a) + problem.obs_norm ** 2 / (2.0 * a) * dpr ** 2
    return dj, dpr


def delta_J(problem: FomProblem, q, u, p, obs: Observation, coercivity: float | None = None) -> float:
    """Bound on ``|J_h(q) - J_r(q)|`` from lifted reduced primal ``u`` and adjoint ``p``."""
    a = problem.coercivity_constant(q) if coercivity is None else coercivity
    return _delta_J(problem, primal_residual(problem, q, u), adjoint_residual(problem, q, u, p, obs), a)[0]


def relative_indicator(delta: float, J_r: float) -> float:
    if abs(J_r) < 1e-300:
        raise ZeroDivisionError("reduced objective is zero; relative indicator undefined")
    return delta / abs(J_r)


@dataclass
class Estimate:
    J_r: float
    delta_J: float
    delta_pr: float
    R: float
    u_r: np.ndarray
    p_r: np.ndarray


def estimate(rom, q_r, u_r: np.ndarray | None = None, p_r: np.ndarray | None = None) -> Estimate:
    """Reduced objective, its error bound and the relative trust-region indicator at ``q_r``."""
    problem = rom.problem
    q_r = np.asarray(q_r, dtype=float)
    if u_r is None:
        u_r = rom.solve_primal_r(q_r)
    if p_r is None:
        p_r = rom.solve_adjoint_r(q_r, u_r)
    q = rom.lift(q_r)
    u = rom.lift_state(u_r)
    p = rom.lift_state(p_r)
    a = problem.coercivity_constant(q)
    res_pr = primal_residual(problem, q, u)
    res_ad = adjoint_residual(problem, q, u, p, rom.obs)
    dj, dpr = _delta_J(problem, res_pr, res_ad, a)
    J_r = rom.misfit_from_state(u_r)
    return Estimate(J_r, dj, dpr, relative_indicator(dj, J_r), u_r, p_r)

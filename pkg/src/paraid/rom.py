"""Reduced-basis model obtained by Galerkin projection onto parameter and state bases.

Reduced parameters are coordinate matrices ``(n_Q, 1)`` or ``(n_Q, K)`` with
respect to an ``M_Q``-orthonormal basis ``Psi_Q``; reduced states are
``(n_V, K)`` coordinates for an ``M_V``-orthonormal ``Psi_V``.  No method of
:class:`RomModel` performs a full-order solve.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import SolverError
from .fom import FomProblem, Observation

__all__ = ["RomModel", "Propagator", "project_model", "ClampResult"]

ORTHONORMALITY_TOL = 1e-8
RESIDENCE_TOL = 1e-10


@dataclass
class ClampResult:
    q_r: np.ndarray  # reduced coordinates of the (clamped) iterate
    q_full: np.ndarray  # lifted and clamped full field
    clamped: bool
    defect: float  # Q-norm of the out-of-span part of the clamped field

    @property
    def resident(self) -> bool:
        return self.defect <= RESIDENCE_TOL * max(np.sqrt(np.sum(self.q_full ** 2)), 1.0)


class Propagator:
    """Implicit Euler sweeps for one fixed reduced parameter, with the step inverses looked up once."""

    def __init__(self, inverses: list, mass_dt: np.ndarray):
        self.inverses = inverses
        self.mass_dt = mass_dt

    def forward(self, rhs: np.ndarray) -> np.ndarray:
        out = np.empty_like(rhs)
        prev = np.zeros(rhs.shape[0])
        for k, inv in enumerate(self.inverses):
            prev = inv @ (self.mass_dt @ prev + rhs[:, k])
            out[:, k] = prev
        return out

    def backward(self, rhs: np.ndarray) -> np.ndarray:
        out = np.empty_like(rhs)
        nxt = np.zeros(rhs.shape[0])
        for k in reversed(range(len(self.inverses))):
            nxt = self.inverses[k].T @ (self.mass_dt @ nxt + rhs[:, k])
            out[:, k] = nxt
        return out


class RomModel:
    def __init__(self, problem: FomProblem, psi_q: np.ndarray, psi_v: np.ndarray, obs: Observation,
                 check: bool = True, cache_size: int = 256):
        self.problem = problem
        self.psi_q = np.asarray(psi_q, dtype=float)
        self.psi_v = np.asarray(psi_v, dtype=float)
        if check:
            for name, basis, gram in (("parameter", self.psi_q, problem.param_gram),
                                      ("state", self.psi_v, problem.h1_state)):
                g = basis.T @ (gram @ basis)
                err = np.abs(g - np.eye(basis.shape[1])).max(initial=0.0)
                if err > ORTHONORMALITY_TOL:
                    raise ValueError(f"{name} basis is not orthonormal (deviation {err:.2e})")
        self.dt = problem.dt
        self.K = problem.K
        pv = self.psi_v
        self.A0 = pv.T @ (problem.affine.constant @ pv)
        self.Acomp = np.stack(
            [pv.T @ (problem.affine.linear_part(self.psi_q[:, j]) @ pv) for j in range(self.n_q)]
        ) if self.n_q else np.zeros((0, self.n_v, self.n_v))
        self.M = pv.T @ (problem.mass_state @ pv)
        self.C = pv.T @ (problem.obs_gram @ pv)
        self.L = pv.T @ problem.source
        self.Cy = pv.T @ obs.weighted
        self.c1 = obs.c1
        self.obs = obs
        # row norms of Psi_Q for the cheap feasibility test
        self.row_norms = np.linalg.norm(self.psi_q, axis=1)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self.counter = {"primal": 0, "adjoint": 0, "linearized_primal": 0, "linearized_adjoint": 0}

    @property
    def n_q(self) -> int:
        return self.psi_q.shape[1]

    @property
    def n_v(self) -> int:
        return self.psi_v.shape[1]

    # ---- lift / restrict ---------------------------------------------------------------
    def lift(self, q_r) -> np.ndarray:
        return self.psi_q @ np.asarray(q_r, dtype=float)

    def restrict(self, q) -> np.ndarray:
        q = self.problem._as_parameter(q)
        return self.psi_q.T @ (self.problem.param_gram @ q)

    def lift_state(self, u_r) -> np.ndarray:
        return self.psi_v @ u_r

    def param_weight(self, q_r) -> float:
        return 1.0 if np.shape(q_r)[1] == 1 else self.dt

    def param_inner(self, a, b) -> float:
        return self.param_weight(a) * float(np.sum(np.asarray(a) * np.asarray(b)))

    def param_norm(self, a) -> float:
        return float(np.sqrt(max(self.param_inner(a, a), 0.0)))

    # ---- operators ---------------------------------------------------------------------
    def A_r(self, q_col) -> np.ndarray:
        return self.A0 + np.tensordot(np.asarray(q_col, dtype=float).ravel(), self.Acomp, axes=1)

    def coupling(self, u_r: np.ndarray) -> np.ndarray:
        """``W[k] = [A_r(e_1) u_r^k, ..., A_r(e_nQ) u_r^k]`` with shape ``(K, n_V, n_Q)``."""
        return np.tensordot(u_r.T, self.Acomp, axes=([1], [2])).transpose(0, 2, 1)

    def B_r(self, u_r: np.ndarray, d_r: np.ndarray, coupling: np.ndarray | None = None) -> np.ndarray:
        """Columnwise ``B_r(u_r^k) d_r^k``; a single column ``d_r`` is broadcast."""
        w = self.coupling(u_r) if coupling is None else coupling
        if d_r.shape[1] == 1:
            return (w @ d_r[:, 0]).T
        return np.matmul(w, d_r.T[:, :, None])[:, :, 0].T

    def B_r_transpose(self, u_r: np.ndarray, p_r: np.ndarray, coupling: np.ndarray | None = None) -> np.ndarray:
        """Columnwise ``B_r(u_r^k)^T p_r^k``."""
        w = self.coupling(u_r) if coupling is None else coupling
        return np.matmul(w.transpose(0, 2, 1), p_r.T[:, :, None])[:, :, 0].T

    def _step_inverse(self, q_col: np.ndarray, k: int) -> np.ndarray:
        key = hashlib.blake2b(np.ascontiguousarray(q_col).tobytes(), digest_size=16).digest()
        inv = self._cache.get(key)
        if inv is not None:
            self._cache.move_to_end(key)
            return inv
        s = self.M / self.dt + self.A_r(q_col)
        try:
            inv = np.linalg.inv(s)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"reduced system at time step {k + 1} is singular") from exc
        if not np.all(np.isfinite(inv)) or np.linalg.cond(s) > 1e14:
            raise SolverError(f"reduced system at time step {k + 1} is singular")
        self._cache[key] = inv
        while len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return inv

    def _inverses(self, q_r) -> list:
        q_r = np.asarray(q_r, dtype=float)
        if q_r.ndim != 2 or q_r.shape[0] != self.n_q or q_r.shape[1] not in (1, self.K):
            raise ValueError(f"reduced parameter shape {q_r.shape} does not match n_Q={self.n_q}, K={self.K}")
        if q_r.shape[1] == 1:
            return [self._step_inverse(q_r[:, 0], 0)] * self.K
        return [self._step_inverse(q_r[:, k], k) for k in range(self.K)]

    def propagator(self, q_r) -> Propagator:
        return Propagator(self._inverses(q_r), self.M / self.dt)

    def _forward(self, q_r, rhs, prop: Propagator | None = None) -> np.ndarray:
        return (prop or self.propagator(q_r)).forward(rhs)

    def _backward(self, q_r, rhs, prop: Propagator | None = None) -> np.ndarray:
        return (prop or self.propagator(q_r)).backward(rhs)

    def solve_primal_r(self, q_r) -> np.ndarray:
        self.counter["primal"] += 1
        return self._forward(q_r, self.L)

    def solve_adjoint_r(self, q_r, u_r) -> np.ndarray:
        self.counter["adjoint"] += 1
        return self._backward(q_r, self.Cy - self.C @ u_r)

    def solve_linearized_primal_r(self, q_r, u_r, d_r, coupling=None, prop=None) -> np.ndarray:
        self.counter["linearized_primal"] += 1
        return self._forward(q_r, -self.B_r(u_r, np.asarray(d_r, dtype=float), coupling), prop)

    def solve_linearized_adjoint_r(self, q_r, u_r, u_lin) -> np.ndarray:
        self.counter["linearized_adjoint"] += 1
        return self._backward(q_r, -self.C @ u_lin + (self.Cy - self.C @ u_r))

    # ---- objective -----------------------------------------------------------------------
    def misfit_from_state(self, u_r) -> float:
        return self.c1 + self.dt * float(np.sum(0.5 * u_r * (self.C @ u_r) - u_r * self.Cy))

    def objective_r(self, q_r, u_r=None) -> float:
        if u_r is None:
            u_r = self.solve_primal_r(q_r)
        return self.misfit_from_state(u_r)

    def gradient_covector_r(self, q_r, u_r, p_r, coupling=None) -> np.ndarray:
        g = self.B_r_transpose(u_r, p_r, coupling)
        if np.shape(q_r)[1] == 1:
            g = self.dt * g.sum(axis=1, keepdims=True)
        return g

    def gradient_r(self, q_r, u_r=None, p_r=None) -> np.ndarray:
        """Reduced gradient in coordinates (the basis is orthonormal, so no Riesz solve)."""
        q_r = np.asarray(q_r, dtype=float)
        if u_r is None:
            u_r = self.solve_primal_r(q_r)
        if p_r is None:
            p_r = self.solve_adjoint_r(q_r, u_r)
        return self.gradient_covector_r(q_r, u_r, p_r)

    # ---- admissibility -----------------------------------------------------------------
    def feasibility_radius(self, q_r) -> np.ndarray:
        """Per-column ``eps^k = min_i slack_i^k / ||Psi_Q[i, :]||``.

        A small safety margin covers rounding in the lift; negative values mean
        the lift of ``q_r`` is itself outside the box.
        """
        p = self.problem
        q = self.lift(q_r)
        margin = 1e-12 * max(1.0, float(np.abs(q).max(initial=0.0)))
        slack = np.minimum(p.upper - q, q - p.lower) - margin
        norms = self.row_norms[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(norms > 0, slack / norms, np.where(slack >= 0, np.inf, -np.inf))
        return ratio.min(axis=0)

    def cheap_feasibility(self, q_r, d_r, radius=None) -> bool:
        """True only if ``Psi_Q (q_r + d_r)`` is certainly inside the box."""
        eps = self.feasibility_radius(q_r) if radius is None else radius
        if np.any(eps < 0):
            return False
        d_r = np.asarray(d_r, dtype=float)
        norms = np.linalg.norm(d_r, axis=0)
        if norms.size == 1 and eps.size > 1:
            norms = np.full(eps.size, norms[0])
        if eps.size == 1 and norms.size > 1:
            return False
        return bool(np.all(norms <= eps))

    def project_box_r(self, q_r) -> ClampResult:
        """Lift, clamp to the box and restrict; reports the out-of-span defect."""
        q_r = np.asarray(q_r, dtype=float)
        q = self.lift(q_r)
        clamped = self.problem.project_box(q)
        if np.array_equal(clamped, q):
            return ClampResult(q_r, q, False, 0.0)
        q_new = self.restrict(clamped)
        defect = self.problem.param_norm(clamped - self.lift(q_new))
        return ClampResult(q_new, clamped, True, defect)

    def is_admissible(self, q_r) -> bool:
        return self.problem.is_admissible(self.lift(q_r))


def project_model(problem: FomProblem, psi_q, psi_v, obs: Observation) -> RomModel:
    return RomModel(problem, psi_q, psi_v, obs)

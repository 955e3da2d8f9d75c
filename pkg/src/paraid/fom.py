"""Full-order model: implicit Euler in time, Q1 elements in space.

Parameter fields are DoF matrices of shape ``(N_Q, K)`` (time dependent) or
``(N_Q, 1)`` (stationary); a single column is broadcast over all time steps.
States are ``(N_V, K)`` matrices holding steps ``1..K``; the zero initial
value (primal) and zero terminal value (adjoint) are implicit.
"""
from __future__ import annotations

import hashlib
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .grid_fem import (
    _MASS_TENSOR,
    AffineOperator,
    Mesh,
    assemble_mass,
    assemble_stiffness,
    constrain,
)

__all__ = [
    "FomProblem",
    "Observation",
    "FomEvaluation",
    "RUN_KINDS",
    "problem_for_run",
    "exact_parameter",
    "exact_field",
    "make_noisy_data",
]

BACKGROUND = 3.0

# run id -> (PDE kind, stationary parameter)
RUN_KINDS = {1: ("reaction", True), 2: ("diffusion", True), 3: ("reaction", False), 4: ("diffusion", False)}


@dataclass(frozen=True)
class Observation:
    """Noisy data ``y`` together with the derived terms of the misfit expansion."""

    values: np.ndarray  # (N_C, K)
    weighted: np.ndarray  # Cy^k, one column per step, zero on boundary rows
    c1: float

    @property
    def K(self) -> int:
        return self.values.shape[1]


@dataclass
class FomEvaluation:
    q: np.ndarray
    u: np.ndarray
    p: np.ndarray
    J: float
    gradient: np.ndarray


def _spd_factor(matrix):
    # every system here is symmetric; a symmetric ordering roughly halves the fill
    return spla.splu(matrix.tocsc(), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})


def _key(column: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(column).tobytes(), digest_size=16).digest()


class FomProblem:
    """Discretised parabolic forward problem on the unit square with ``f = 1``."""

    def __init__(self, mesh: Mesh, kind: str, K: int = 50, T: float = 1.0, lower: float = 1e-3,
                 upper: float = 1e3, stationary: bool = True, source=None, cache_size: int | None = None):
        if kind not in ("reaction", "diffusion"):
            raise ValueError(f"unknown kind {kind!r}")
        if K < 1:
            raise ValueError("K must be positive")
        if not 0 < lower < upper:
            raise ValueError("need 0 < lower < upper")
        self.mesh = mesh
        self.kind = kind
        self.K = int(K)
        self.T = float(T)
        self.dt = self.T / self.K
        self.lower = float(lower)
        self.upper = float(upper)
        self.stationary = bool(stationary)
        self.obs_norm = 1.0  # ||C||_{L(V,C)} for the L2 embedding with the full H1 norm on V
        self.affine = AffineOperator(mesh, kind)
        f = np.ones(mesh.n_nodes) if source is None else np.asarray(source, dtype=float)
        self._source_nodal = f
        self.counter: Counter = Counter()
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size or 2 * self.K + 4
        self._lock = threading.Lock()

    # ---- Gram matrices ------------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self.mesh)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return assemble_stiffness(self.mesh)

    @cached_property
    def h1(self) -> sp.csr_matrix:
        return (self.mass + self.stiffness).tocsr()

    @cached_property
    def mass_state(self) -> sp.csr_matrix:
        """``M_H`` restricted to the Dirichlet state space (zero boundary rows/cols)."""
        return constrain(self.mesh, self.mass, diagonal=0.0)

    @property
    def obs_gram(self) -> sp.csr_matrix:
        """``C_h``: Gram matrix of the observed states; the L2 embedding makes it ``M_H``."""
        return self.mass_state

    @cached_property
    def h1_state(self) -> sp.csr_matrix:
        """``M_V`` on the Dirichlet state space, unit diagonal on boundary nodes."""
        return constrain(self.mesh, self.h1, diagonal=1.0)

    @cached_property
    def param_gram(self) -> sp.csr_matrix:
        """``M_Q``: L2 Gram for reaction, full H1 Gram for diffusion."""
        return self.mass if self.kind == "reaction" else self.h1

    @cached_property
    def param_gram_lu(self):
        return _spd_factor(self.param_gram)

    @cached_property
    def h1_state_lu(self):
        return _spd_factor(self.h1_state)

    @cached_property
    def source(self) -> np.ndarray:
        """Load vectors ``L_h^k`` as an ``(N_V, K)`` matrix."""
        f = self._source_nodal
        interior = self.mesh.interior_mask[:, None]
        if f.ndim == 1:
            vec = (self.mass @ f)[:, None] * interior
            return np.repeat(vec, self.K, axis=1)
        if f.shape != (self.n, self.K):
            raise ValueError("time dependent source must have shape (N, K)")
        return (self.mass @ f) * interior

    # ---- parameters ---------------------------------------------------------------------
    @property
    def parameter_columns(self) -> int:
        return 1 if self.stationary else self.K

    def constant_parameter(self, value: float = BACKGROUND) -> np.ndarray:
        return np.full((self.n, self.parameter_columns), float(value))

    def _as_parameter(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if q.shape[0] != self.n or q.shape[1] not in (1, self.K):
            raise ValueError(f"parameter shape {q.shape} incompatible with N={self.n}, K={self.K}")
        return q

    def param_weight(self, q: np.ndarray) -> float:
        return 1.0 if q.shape[1] == 1 else self.dt

    def param_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Inner product of ``Q_h`` (one column) or the Bochner product of ``Q_h^K``."""
        a = self._as_parameter(a)
        b = self._as_parameter(b)
        return self.param_weight(a) * float(np.sum(a * (self.param_gram @ b)))

    def param_norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.param_inner(a, a), 0.0)))

    def project_box(self, q) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)

    def is_admissible(self, q) -> bool:
        q = np.asarray(q)
        return bool(np.all(q >= self.lower) and np.all(q <= self.upper))

    def coercivity_constant(self, q) -> float:
        if self.kind == "reaction":
            return 1.0
        a = float(np.min(q))
        if not a > 0:
            raise ValueError(f"coercivity constant {a} is not positive")
        return a

    def state_inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return self.dt * float(np.sum(u * (self.h1_state @ v)))

    # ---- time stepping ------------------------------------------------------------------
    def _factor(self, column: np.ndarray):
        key = _key(column)
        with self._lock:
            lu = self._cache.get(key)
            if lu is not None:
                self._cache.move_to_end(key)
                return lu
        data = self.affine.evaluate_data(column) + self._mass_data / self.dt
        mat = self.mesh._assembler.matrix(data)
        try:
            lu = _spd_factor(mat)
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"state system is singular: {exc}") from exc
        with self._lock:
            self._cache[key] = lu
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return lu

    @cached_property
    def _mass_data(self) -> np.ndarray:
        # constrained M_H on the shared CSR pattern
        asm = self.mesh._assembler
        return asm.data(asm.local(_MASS_TENSOR * self.mesh.h ** 2, np.ones(self.n))) * asm.interior_entry

    def _factors(self, q: np.ndarray) -> list:
        q = self._as_parameter(q)
        if q.shape[1] == 1:
            return [self._factor(q[:, 0])] * self.K
        return [self._factor(q[:, k]) for k in range(self.K)]

    def _forward(self, q, rhs: np.ndarray) -> np.ndarray:
        lus = self._factors(q)
        m = self.mass_state / self.dt
        out = np.zeros((self.n, self.K))
        prev = np.zeros(self.n)
        for k in range(self.K):
            prev = lus[k].solve(m @ prev + rhs[:, k])
            out[:, k] = prev
        if not np.all(np.isfinite(out)):
            raise SolverError("non-finite state trajectory")
        return out

    def _backward(self, q, rhs: np.ndarray) -> np.ndarray:
        lus = self._factors(q)
        m = self.mass_state / self.dt
        out = np.zeros((self.n, self.K))
        nxt = np.zeros(self.n)
        for k in reversed(range(self.K)):
            nxt = lus[k].solve(m @ nxt + rhs[:, k], trans="T")
            out[:, k] = nxt
        if not np.all(np.isfinite(out)):
            raise SolverError("non-finite adjoint trajectory")
        return out

    def solve_primal(self, q) -> np.ndarray:
        self.counter["primal"] += 1
        return self._forward(q, self.source)

    def solve_adjoint(self, q, u: np.ndarray, obs: Observation) -> np.ndarray:
        self.counter["adjoint"] += 1
        return self._backward(q, obs.weighted - self.obs_gram @ u)

    def solve_linearized_primal(self, q, u: np.ndarray, d) -> np.ndarray:
        self.counter["linearized_primal"] += 1
        d = self._as_parameter(d)
        return self._forward(q, -self.affine.apply_linear(d, u))

    def solve_linearized_adjoint(self, q, u: np.ndarray, u_lin: np.ndarray, obs: Observation) -> np.ndarray:
        self.counter["linearized_adjoint"] += 1
        rhs = -self.obs_gram @ u_lin + (obs.weighted - self.obs_gram @ u)
        return self._backward(q, rhs)

    def residual_forcing(self, u: np.ndarray, obs: Observation) -> np.ndarray:
        return obs.weighted - self.obs_gram @ u

    @property
    def fom_solves(self) -> int:
        return sum(self.counter.values())

    # ---- objective and gradient ---------------------------------------------------------
    def observation(self, y: np.ndarray) -> Observation:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n, self.K):
            raise ValueError(f"observation must have shape {(self.n, self.K)}")
        weighted = (self.mass @ y) * self.mesh.interior_mask[:, None]
        c1 = 0.5 * self.dt * float(np.sum(y * (self.mass @ y)))
        return Observation(y, weighted, c1)

    def misfit_from_state(self, u: np.ndarray, obs: Observation) -> float:
        """``c1 + dt * sum_k (u^T C u / 2 - u^T Cy)``."""
        cu = self.obs_gram @ u
        return obs.c1 + self.dt * float(np.sum(0.5 * u * cu - u * obs.weighted))

    def misfit_direct(self, u: np.ndarray, obs: Observation) -> float:
        """``dt/2 * sum_k ||u^k - y^k||^2_{M_C}`` evaluated without the expansion."""
        r = u - obs.values
        return 0.5 * self.dt * float(np.sum(r * (self.mass @ r)))

    def objective(self, q, obs: Observation, u: np.ndarray | None = None) -> float:
        if u is None:
            u = self.solve_primal(q)
        return self.misfit_from_state(u, obs)

    def riesz(self, covector: np.ndarray) -> np.ndarray:
        """Apply ``M_Q^{-1}`` column-wise."""
        return self.param_gram_lu.solve(np.asarray(covector, dtype=float))

    def gradient_covector(self, q, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        q = self._as_parameter(q)
        g = self.affine.apply_linear_transpose(u, p)
        if q.shape[1] == 1:
            g = self.dt * g.sum(axis=1, keepdims=True)
        return g

    def gradient(self, q, obs: Observation, u: np.ndarray | None = None, p: np.ndarray | None = None) -> np.ndarray:
        if u is None:
            u = self.solve_primal(q)
        if p is None:
            p = self.solve_adjoint(q, u, obs)
        return self.riesz(self.gradient_covector(q, u, p))

    def evaluate(self, q, obs: Observation, u: np.ndarray | None = None) -> FomEvaluation:
        q = self._as_parameter(q)
        if u is None:
            u = self.solve_primal(q)
        p = self.solve_adjoint(q, u, obs)
        return FomEvaluation(q=q, u=u, p=p, J=self.misfit_from_state(u, obs), gradient=self.gradient(q, obs, u, p))


# ---- benchmark definitions ----------------------------------------------------------------
def _gaussians(x: np.ndarray) -> np.ndarray:
    amp = 1.0 / (0.02 * np.pi)
    out = np.zeros(x.shape[0])
    for s in (2.0, 0.8):
        z = ((s * x[:, 0] - 0.5) / 0.1) ** 2 + ((s * x[:, 1] - 0.5) / 0.1) ** 2
        out += amp * np.exp(-0.5 * z)
    return out


def _inclusions(x: np.ndarray) -> np.ndarray:
    tol = 1e-12
    x1, x2 = x[:, 0], x[:, 1]

    def inside(v, a, b):
        return (v >= a - tol) & (v <= b + tol)

    bar = inside(x1, 5 / 30, 9 / 30) & inside(x2, 3 / 30, 27 / 30)
    arms = inside(x1, 9 / 30, 27 / 30) & (inside(x2, 3 / 30, 7 / 30) | inside(x2, 23 / 30, 27 / 30))
    omega1 = bar | arms
    omega2 = np.hypot(x1 - 18 / 30, x2 - 15 / 30) < 4 / 30 - tol  # open disk, nodes on the circle excluded
    return omega1.astype(float) - omega2.astype(float)


def exact_field(run_id: int, x, t: float | None = None) -> np.ndarray:
    """Exact parameter of a benchmark run at points ``x`` (shape ``(n, 2)``) and time ``t``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if run_id not in RUN_KINDS:
        raise ValueError(f"unknown run id {run_id!r}")
    kind, stationary = RUN_KINDS[run_id]
    bump = _gaussians(x) if kind == "reaction" else 2.0 * _inclusions(x)
    if stationary:
        return BACKGROUND + bump
    if t is None:
        raise ValueError("time dependent run needs t")
    return BACKGROUND + np.sin(np.pi * t) * bump


def exact_parameter(run_id: int, mesh: Mesh, K: int, T: float = 1.0) -> np.ndarray:
    """Nodal interpolant of the exact parameter, ``(N, 1)`` or ``(N, K)``."""
    if run_id not in RUN_KINDS:
        raise ValueError(f"unknown run id {run_id!r}")
    _, stationary = RUN_KINDS[run_id]
    x = mesh.coordinates
    if stationary:
        return exact_field(run_id, x)[:, None]
    times = T * np.arange(1, K + 1) / K
    return np.column_stack([exact_field(run_id, x, t) for t in times])


def problem_for_run(run_id: int, cells_per_side: int = 300, K: int = 50, **kwargs) -> FomProblem:
    if run_id not in RUN_KINDS:
        raise ValueError(f"unknown run id {run_id!r}")
    kind, stationary = RUN_KINDS[run_id]
    return FomProblem(Mesh(cells_per_side), kind, K=K, stationary=stationary, **kwargs)


def make_noisy_data(problem: FomProblem, q_exact, delta: float, seed: int = 0) -> Observation:
    """``y = C u_e + delta * xi / ||xi||`` with ``xi ~ U[-1, 1]`` on every observation DoF and step.

    The noise is normalised in the discrete Bochner norm built on the full H1
    Gram matrix of the observation nodes.
    """
    if delta < 0:
        raise ValueError("noise level must be non-negative")
    u = problem.solve_primal(q_exact)
    if delta == 0:
        return problem.observation(u)
    rng = np.random.default_rng(seed)
    while True:
        xi = rng.uniform(-1.0, 1.0, size=u.shape)
        norm = np.sqrt(problem.dt * float(np.sum(xi * (problem.h1 @ xi))))
        if norm > 0:
            break
    return problem.observation(u + delta * xi / norm)

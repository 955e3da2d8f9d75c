"""Linearised Tikhonov subproblems and the regularisation-parameter loop.

A *linearisation* wraps a model (full or reduced) at a fixed point ``q``.  It
knows the state ``u(q)``, the objective ``J(q)`` and its Riesz gradient, and
offers the two linear solves needed for the quadratic

    J~(d) = 1/2 ||F(q) + F'(q) d - y||^2 + alpha/2 ||q + d - q_circ||^2 .

Because ``d -> u~(d)`` is linear, the solver updates states and gradients
incrementally and evaluates line searches in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import SolverError

__all__ = [
    "FomLinearization",
    "RomLinearization",
    "TikhonovSubproblem",
    "PgdSettings",
    "PgdResult",
    "solve_pgd",
    "regulate_alpha",
    "AlphaResult",
]

ALPHA_FLOOR = 1e-14
# steps below this fraction of the iterate norm count as stagnation
NEGLIGIBLE_STEP = 1e-13


class FomLinearization:
    def __init__(self, problem, q, obs, evaluation=None):
        self.problem = problem
        self.obs = obs
        self.q = problem._as_parameter(q)
        if evaluation is None:
            evaluation = problem.evaluate(self.q, obs)
        self.u = evaluation.u
        self.J = evaluation.J
        self.gradient = evaluation.gradient
        self.residual = problem.residual_forcing(self.u, obs)  # Cy - C u
        self.weight = problem.param_weight(self.q)

    def zeros(self) -> np.ndarray:
        return np.zeros_like(self.q)

    def inner(self, a, b) -> float:
        return self.problem.param_inner(a, b)

    def state(self, d) -> np.ndarray:
        return self.problem.solve_linearized_primal(self.q, self.u, d)

    def state_gradient(self, u_lin) -> np.ndarray:
        """Riesz gradient of ``d -> 1/2 ||C u~(d)||^2`` part, i.e. ``M_Q^{-1} B(u)^T p~`` for the homogeneous adjoint."""
        p = self.problem
        p.counter["linearized_adjoint"] += 1
        p_lin = p._backward(self.q, -(p.obs_gram @ u_lin))
        return p.riesz(p.gradient_covector(self.q, self.u, p_lin))

    def obs_inner(self, a, b) -> float:
        return self.problem.dt * float(np.sum(a * (self.problem.obs_gram @ b)))

    def misfit(self, u_lin) -> float:
        """``J(q) + <C u - y, C u~> + 1/2 ||C u~||^2``."""
        return self.J - self.problem.dt * float(np.sum(self.residual * u_lin)) + 0.5 * self.obs_inner(u_lin, u_lin)

    def project(self, d):
        return self.problem.project_box(self.q + d) - self.q, True

    def truncate(self, d, direction):
        return _truncate(self.q + d, direction, self.q + d, direction, self.problem)


def _truncate(q_coords, direction, q_field, dir_field, problem):
    """Largest ``lam * direction`` with ``lam`` in [0, 1] keeping the field inside the box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(dir_field > 0, (problem.upper - q_field) / dir_field, np.inf)
        down = np.where(dir_field < 0, (problem.lower - q_field) / dir_field, np.inf)
    lam = float(np.clip(min(up.min(initial=np.inf), down.min(initial=np.inf), 1.0), 0.0, 1.0))
    return lam * direction


class RomLinearization:
    """Linearisation of a :class:`~paraid.rom.RomModel` at reduced coordinates ``q_r``.

    When the reduced parameter has at most ``dense_limit`` entries the full
    sensitivity matrix ``d -> u~(d)`` is assembled once, after which every
    linearised solve is a small matrix product.
    """

    dense_limit = 128

    def __init__(self, rom, q_r):
        self.rom = rom
        self.q = np.asarray(q_r, dtype=float)
        self.u = rom.solve_primal_r(self.q)
        self.w = rom.coupling(self.u)
        # time stepping at the fixed linearisation point, set up once
        self._prop = rom.propagator(self.q)
        p_r = rom.solve_adjoint_r(self.q, self.u)
        self.p = p_r
        self.J = rom.misfit_from_state(self.u)
        self.gradient = rom.gradient_covector_r(self.q, self.u, p_r, self.w)
        self.residual = rom.Cy - rom.C @ self.u
        self.weight = rom.param_weight(self.q)
        self.radius = rom.feasibility_radius(self.q)
        self.lift_calls = 0
        self.cheap_hits = 0
        self.sensitivity = None
        if self.q.size <= self.dense_limit:
            cols = []
            for j in range(self.q.size):
                e = np.zeros(self.q.size)
                e[j] = 1.0
                cols.append(rom.solve_linearized_primal_r(self.q, self.u, e.reshape(self.q.shape), self.w,
                                                          self._prop).ravel())
            self.sensitivity = np.column_stack(cols) if cols else np.zeros((self.u.size, 0))
            # C-weighted sensitivities for the gradient map
            cs = np.einsum("ab,bkj->akj", rom.C, self.sensitivity.reshape(rom.n_v, rom.K, -1))
            self._cst = (rom.dt / self.weight) * cs.reshape(-1, self.q.size).T

    def zeros(self) -> np.ndarray:
        return np.zeros_like(self.q)

    def inner(self, a, b) -> float:
        return self.rom.param_inner(a, b)

    def state(self, d) -> np.ndarray:
        if self.sensitivity is not None:
            return (self.sensitivity @ np.ravel(d)).reshape(self.u.shape)
        return self.rom.solve_linearized_primal_r(self.q, self.u, d, self.w, self._prop)

    def state_gradient(self, u_lin) -> np.ndarray:
        rom = self.rom
        if self.sensitivity is not None:
            # adjoint identity: <G u~, e>_Q = dt sum_k (C u~^k)^T u~(e)^k
            return (self._cst @ u_lin.ravel()).reshape(self.q.shape)
        rom.counter["linearized_adjoint"] += 1
        p_lin = rom._backward(self.q, -(rom.C @ u_lin), self._prop)
        return rom.gradient_covector_r(self.q, self.u, p_lin, self.w)

    def obs_inner(self, a, b) -> float:
        return self.rom.dt * float(np.sum(a * (self.rom.C @ b)))

    def misfit(self, u_lin) -> float:
        return self.J - self.rom.dt * float(np.sum(self.residual * u_lin)) + 0.5 * self.obs_inner(u_lin, u_lin)

    def project(self, d):
        if self.rom.cheap_feasibility(self.q, d, self.radius):
            self.cheap_hits += 1
            return d, True
        self.lift_calls += 1
        res = self.rom.project_box_r(self.q + d)
        if not res.clamped:
            return d, True
        if not res.resident:
            return None, False
        return res.q_r - self.q, True

    def truncate(self, d, direction):
        rom = self.rom
        return _truncate(self.q + d, direction, rom.lift(self.q + d), rom.lift(direction), rom.problem)


@dataclass
class TikhonovSubproblem:
    lin: object
    alpha: float
    q_circ: np.ndarray  # regularisation centre in the model's coordinates

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        self.shift = self.q_circ - self.lin.q  # q~_circ

    def misfit(self, u_lin) -> float:
        """``J~(d; q, 0)`` from the linearised state ``u~(d)``."""
        return self.lin.misfit(u_lin)

    def value(self, d, u_lin) -> float:
        r = d - self.shift
        return self.misfit(u_lin) + 0.5 * self.alpha * self.lin.inner(r, r)

    def gradient(self, d, g_state) -> np.ndarray:
        """Riesz gradient; ``g_state`` is the misfit part ``gradient(J)(q) + G u~(d)``."""
        return g_state + self.alpha * (d - self.shift)


@dataclass
class PgdSettings:
    max_iterations: int = 10_000
    tolerance: float = 1e-8
    stagnation_window: int = 5
    stagnation_tol: float = 1e-16
    nonmonotone_memory: int = 5
    armijo_c: float = 1e-12
    step_min: float = 1e-30
    step_max: float = 1e30
    refresh_every: int = 100

    def __post_init__(self):
        if self.tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("PGD tolerances must be positive")


@dataclass
class PgdResult:
    d: np.ndarray
    u_lin: np.ndarray
    value: float
    misfit: float
    iterations: int
    stop_reason: str
    optimality: float
    optimality0: float
    rejected_projections: int = 0


def solve_pgd(sub: TikhonovSubproblem, settings: PgdSettings | None = None, d0=None,
              trust_region_guard: Optional[Callable[[np.ndarray], bool]] = None) -> PgdResult:
    """Projected gradient descent with alternating Barzilai-Borwein steps.

    Nonmonotone acceptance over the last few values; the objective is
    quadratic along every search segment so backtracking needs no solves.
    """
    s = settings or PgdSettings()
    lin = sub.lin
    d = lin.zeros() if d0 is None else np.array(d0, dtype=float)
    d, ok = lin.project(d)
    if not ok:
        d = lin.zeros()
    u_lin = lin.state(d) if np.any(d) else np.zeros_like(lin.u)
    g_state = lin.gradient + (lin.state_gradient(u_lin) if np.any(d) else 0.0)

    def f_of(dd, uu):
        return sub.value(dd, uu)

    def opt_measure(dd, gg):
        pd, okp = lin.project(dd - gg)
        if not okp:
            pd = dd + lin.truncate(dd, -gg)
        return np.sqrt(max(lin.inner(pd - dd, pd - dd), 0.0))

    f = f_of(d, u_lin)
    g = sub.gradient(d, g_state)
    opt0 = opt_measure(d, g)
    history = [f]
    if not np.isfinite(f):
        raise SolverError("non-finite subproblem objective")
    if opt0 == 0.0:
        return PgdResult(d, u_lin, f, lin.misfit(u_lin), 0, "optimal", 0.0, 0.0)
    gn = np.sqrt(max(lin.inner(g, g), 0.0))
    step = 1.0 / gn if gn > 0 else 1.0
    stagnant = 0
    reason = "max-iterations"
    opt = opt0
    rejected = 0
    it = 0
    for it in range(1, s.max_iterations + 1):
        # spectral projected direction; if clamping leaves the reduced span, stop at the box instead
        target, ok = lin.project(d - step * g)
        if not ok:
            rejected += 1
            target = d + lin.truncate(d, -step * g)
        p = target - d
        gp = lin.inner(g, p)
        if gp >= 0 or not np.any(p):
            reason = "no-descent"
            break
        up = lin.state(p)
        curv = lin.obs_inner(up, up) + sub.alpha * lin.inner(p, p)
        # quadratic along the segment: f(d + lam p) = f + lam gp + lam^2/2 curv
        fmax = max(history[-s.nonmonotone_memory:])
        lam = 1.0
        while True:
            f_new = f + lam * gp + 0.5 * lam * lam * curv
            if f_new <= fmax - s.armijo_c * lam * lam * lin.inner(p, p) and (
                    trust_region_guard is None or trust_region_guard(d + lam * p)):
                break
            lam *= 0.5
            if lam < 1e-20:
                break
        if lam < 1e-20:
            reason = "no-descent"
            break
        gp_state = lin.state_gradient(up)
        sk = lam * p
        d = d + sk
        u_lin = u_lin + lam * up
        g_state = g_state + lam * gp_state
        if s.refresh_every and it % s.refresh_every == 0:
            u_lin = lin.state(d)
            g_state = lin.gradient + lin.state_gradient(u_lin)
            f_new = f_of(d, u_lin)
        g_new = sub.gradient(d, g_state)
        yk = g_new - g
        g = g_new
        if not np.isfinite(f_new):
            raise SolverError("non-finite subproblem objective")
        base = lin.q + d
        if abs(f_new - f) <= s.stagnation_tol * abs(f) or lin.inner(sk, sk) <= NEGLIGIBLE_STEP ** 2 * lin.inner(base, base):
            stagnant += 1
        else:
            stagnant = 0
        f = f_new
        history.append(f)
        opt = opt_measure(d, g)
        if opt <= s.tolerance * opt0:
            reason = "optimal"
            break
        if stagnant >= s.stagnation_window:
            reason = "stagnation"
            break
        sy = lin.inner(sk, yk)
        if sy > 0:
            step = lin.inner(sk, sk) / sy if it % 2 else sy / lin.inner(yk, yk)
        else:
            step = s.step_max if step * 10 > s.step_max else step * 10
        step = min(max(step, s.step_min), s.step_max)
    return PgdResult(d, u_lin, f, lin.misfit(u_lin), it, reason, opt, opt0, rejected)


@dataclass
class AlphaResult:
    d: np.ndarray
    alpha: float
    ratio: float  # 2 J~(d; q, 0) / J(q)
    at_floor: bool
    pgd: PgdResult
    trace: list = field(default_factory=list)  # (alpha, ratio, pgd iterations)

    @property
    def subproblem_solves(self) -> int:
        return len(self.trace)


def regulate_alpha(lin, q_circ, alpha0: float, theta: float = 0.4, Theta: float = 1.95,
                   settings: PgdSettings | None = None, d0=None, max_bisections: int = 20) -> AlphaResult:
    """Choose ``alpha`` with ``theta J(q) <= 2 J~(d_alpha; q, 0) <= Theta J(q)``.

    Starting from ``alpha0`` the weight is doubled (too little misfit) or
    halved (too much).  Once both sides have been seen it is bisected
    geometrically; if that does not land inside the band the closest value is
    returned.  Halving stops at ``1e-14``.
    """
    if not 0 < theta < Theta < 2:
        raise ValueError("need 0 < theta < Theta < 2")
    if not alpha0 > 0:
        raise ValueError("alpha0 must be positive")
    target_lo, target_hi = theta * lin.J, Theta * lin.J
    trace = []
    lo = hi = None  # alpha too small / too large
    best = None
    alpha = float(alpha0)
    d_prev = d0
    bisections = 0
    while True:
        res = solve_pgd(TikhonovSubproblem(lin, alpha, q_circ), settings, d_prev)
        val = 2.0 * res.misfit
        if not np.isfinite(val):
            raise SolverError("non-finite linearised misfit")
        ratio = val / lin.J if lin.J > 0 else np.inf
        trace.append((alpha, ratio, res.iterations))
        d_prev = res.d
        dist = 0.0 if target_lo <= val <= target_hi else min(abs(val - target_lo), abs(val - target_hi))
        if best is None or dist < best[0]:
            best = (dist, alpha, res, ratio)
        if dist == 0.0:
            return AlphaResult(res.d, alpha, ratio, False, res, trace)
        if val < target_lo:
            lo = alpha
        else:
            hi = alpha
            if alpha <= ALPHA_FLOOR:
                return AlphaResult(res.d, alpha, ratio, True, res, trace)
        if lo is not None and hi is not None:
            if bisections >= max_bisections:
                _, a, r, rt = best
                return AlphaResult(r.d, a, rt, False, r, trace)
            bisections += 1
            alpha = float(np.sqrt(lo * hi))
        elif hi is not None:
            alpha = max(alpha / 2.0, ALPHA_FLOOR)
        else:
            alpha = alpha * 2.0
            if alpha > 1e300:
                raise SolverError("alpha diverged while increasing")

"""Error-aware trust-region IRGNM on adaptively enriched reduced bases.

The trust region at outer iteration ``i`` is the set of reduced parameters
whose relative objective error indicator ``Delta^J / |J_r|`` stays below
``eta``.  Full-order solves happen only when bases are enriched and when the
exact sufficient-decrease test cannot be decided by the error bound.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError, StagnationError
from .estimator import Estimate, estimate
from .irgnm import discrepancy_level
from .reduction import Bases, enrich_after_acceptance, enrich_on_failure, init_bases
from .rom import RomModel
from .subproblem import NEGLIGIBLE_STEP, PgdSettings, RomLinearization, regulate_alpha

__all__ = ["TrSettings", "TrRecord", "DecisionRecord", "TrResult", "TrState", "run_tr_irgnm",
           "compute_agc", "inner_solve", "accept_or_reject"]


@dataclass
class TrSettings:
    delta: float = 1e-5
    tau: float = 3.5
    tau_tilde: float = 3.5
    delta_tilde: float | None = None  # defaults to delta
    theta: float = 0.4
    Theta: float = 1.95
    alpha0: float = 1e-5
    eta0: float = 0.1
    beta1: float = 0.95
    beta2: float = 0.75
    beta3: float = 0.5
    kappa_arm: float = 1e-12
    eps_pod: float = 1e-12
    agc_max_backtracks: int = 100
    line_search_max_backtracks: int = 100
    max_inner: int = 50
    max_rejects: int = 25
    max_outer: int = 100
    pgd: PgdSettings = field(default_factory=PgdSettings)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta3 < 1 and 0.75 <= self.beta2 < 1):
            raise ValueError("need beta1, beta3 in (0, 1) and beta2 in [3/4, 1)")
        if not (self.tau > 1 and self.tau_tilde > 1):
            raise ValueError("tau and tau_tilde must exceed 1")
        if not 0 < self.theta < self.Theta < 2:
            raise ValueError("need 0 < theta < Theta < 2")
        if not (self.eta0 > 0 and self.alpha0 > 0 and self.eps_pod > 0 and self.kappa_arm > 0):
            raise ValueError("eta0, alpha0, eps_pod and kappa_arm must be positive")
        if self.delta_tilde is None:
            self.delta_tilde = self.delta
        if self.delta_tilde < self.delta:
            raise ValueError("delta_tilde must be at least delta")


@dataclass
class TrRecord:
    """One row of the outer history (initial state, acceptance or rejection)."""

    iteration: int
    J: float
    alpha: float
    inner_iterations: int
    fom_solves: int
    wall_time: float
    eta: float
    n_q: int
    n_v: int
    branch: str
    delta_J_trial: float


@dataclass
class DecisionRecord:
    iteration: int
    branch: str
    accepted: bool
    eta_before: float
    eta_after: float
    n_q_before: int
    n_v_before: int
    n_q_after: int
    n_v_after: int
    decision_fom_solves: int  # full-order solves spent deciding (before any enrichment)
    R_trial: float
    J_r_trial: float
    delta_J_trial: float
    J_r_agc: float
    rho: float
    inner_R: list  # (R, eta) for the AGC and every inner iterate that was used
    alphas: list
    failure_enrichments: list


@dataclass
class TrResult:
    q: np.ndarray
    J: float
    converged: bool
    stop_reason: str
    history: list
    decisions: list
    iterates: list
    bases: Bases

    @property
    def iterations(self) -> int:
        return sum(d.accepted for d in self.decisions)


@dataclass
class TrState:
    problem: object
    obs: object
    settings: TrSettings
    bases: Bases
    rom: RomModel
    q: np.ndarray  # current full-order iterate (lift of q_r)
    q_r: np.ndarray
    evaluation: object  # full-order evaluation at q
    q_circ: np.ndarray
    eta: float
    t_bar: float
    alpha_chain: float

    @property
    def q_circ_r(self) -> np.ndarray:
        return self.rom.restrict(self.q_circ)

    def rebuild(self):
        self.rom = RomModel(self.problem, self.bases.psi_q, self.bases.psi_v, self.obs)
        self.q_r = self.rom.restrict(self.q)


def _reduced_norm_sq(rom, a) -> float:
    return rom.param_inner(a, a)


def compute_agc(state: TrState, q_r0=None, est0: Estimate | None = None):
    """Projected reduced gradient step with halving until it is in the trust region and decays.

    Returns ``(q_agc, t, estimate)`` or ``(None, t, None)`` after the backtracking cap.
    """
    s = state.settings
    rom = state.rom
    q_r0 = state.q_r if q_r0 is None else q_r0
    est0 = estimate(rom, q_r0) if est0 is None else est0
    g = rom.gradient_r(q_r0, est0.u_r, est0.p_r)
    t = state.t_bar
    for _ in range(s.agc_max_backtracks + 1):
        res = rom.project_box_r(q_r0 - t * g)
        if res.resident:
            cand = res.q_r
            est = estimate(rom, cand)
            step = cand - q_r0
            if est.R <= state.eta and est.J_r - est0.J_r <= -(s.kappa_arm / t) * _reduced_norm_sq(rom, step):
                return cand, t, est
        t *= 0.5
    return None, t, None


def inner_solve(state: TrState, q_agc, est_agc: Estimate, alpha0: float):
    """Reduced IRGNM started at the AGC with trust-region backtracking.

    Returns ``(q_trial, estimate, alphas, used, flag)`` where ``used`` lists
    ``(R, eta)`` of every accepted inner iterate and ``flag`` tells why it stopped.
    """
    s = state.settings
    rom = state.rom
    level = discrepancy_level(s.tau_tilde, s.delta_tilde)
    q_l, est_l = q_agc, est_agc
    alphas = []
    used = []
    alpha = alpha0
    t_prev = None
    q_circ_r = state.q_circ_r
    flag = "max-inner"
    for l in range(1, s.max_inner + 1):
        if est_l.J_r < level:
            flag = "reduced-discrepancy"
            break
        if s.beta1 * state.eta <= est_l.R:
            flag = "boundary"
            break
        lin = RomLinearization(rom, q_l)
        res = regulate_alpha(lin, q_circ_r, alpha, s.theta, s.Theta, s.pgd)
        alpha = res.alpha
        alphas.append(alpha)
        d = res.d
        t = 1.0 if t_prev is None else min(2.0 * t_prev, 1.0)
        accepted = None
        # halving below rounding level of q_l cannot change the iterate any more
        negligible = NEGLIGIBLE_STEP * max(rom.param_norm(q_l), np.finfo(float).tiny)
        for _ in range(s.line_search_max_backtracks + 1):
            if rom.param_norm(t * d) <= negligible:
                break
            cand = q_l + t * d
            est = estimate(rom, cand)
            if est.R <= state.eta and est.J_r - est_l.J_r <= -(s.kappa_arm / t) * _reduced_norm_sq(rom, t * d):
                accepted = (cand, est)
                break
            t *= 0.5
        if accepted is None:
            flag = "line-search"
            break
        q_l, est_l = accepted
        used.append((est_l.R, state.eta))
        t_prev = t
    return q_l, est_l, alphas, used, flag


def accept_or_reject(state: TrState, q_trial, est_trial: Estimate, est_agc: Estimate, is_agc: bool):
    """Decide on a trial point; returns ``(branch, accepted, u_h_trial or None)``.

    Branches: ``agc`` (AGC returned, accept), ``sufficient`` (bound proves
    decrease), ``necessary`` (bound proves failure), ``exact-accept`` /
    ``exact-reject`` (decided by a full-order objective evaluation).
    """
    J_agc = est_agc.J_r
    if is_agc:
        return "agc", True, None
    if est_trial.J_r + est_trial.delta_J < J_agc:
        return "sufficient", True, None
    if est_trial.J_r - est_trial.delta_J > J_agc:
        return "necessary", False, None
    problem = state.problem
    q_full = state.rom.lift(q_trial)
    u = problem.solve_primal(q_full)
    if problem.objective(q_full, state.obs, u) <= J_agc:
        return "exact-accept", True, u
    return "exact-reject", False, None


def run_tr_irgnm(problem, obs, settings: TrSettings | None = None, q0=None, q_circ=None,
                 callback=None) -> TrResult:
    s = settings or TrSettings()
    t0 = time.perf_counter()
    q = problem.constant_parameter() if q0 is None else problem._as_parameter(q0).copy()
    if not problem.is_admissible(q):
        raise ValueError("initial parameter is not admissible")
    q_circ = q.copy() if q_circ is None else problem._as_parameter(q_circ)
    level = discrepancy_level(s.tau, s.delta)

    bases, ev = init_bases(problem, q, obs, s.eps_pod, q_circ=q_circ)
    rom = RomModel(problem, bases.psi_q, bases.psi_v, obs)
    gnorm = problem.param_norm(ev.gradient)
    t_bar = min(0.5 / gnorm, 1.0) if gnorm > 0 else 1.0
    state = TrState(problem, obs, s, bases, rom, q, rom.restrict(q), ev, q_circ, s.eta0, t_bar, s.alpha0)

    history = [TrRecord(0, ev.J, float("nan"), 0, problem.fom_solves, time.perf_counter() - t0,
                        state.eta, bases.n_q, bases.n_v, "init", float("nan"))]
    decisions = []
    iterates = [q.copy()]
    reason = "discrepancy"
    rejects = 0
    outer = 0
    while state.evaluation.J > level:
        failures = []
        if outer >= s.max_outer:
            reason = "max-iterations"
            break
        # make sure the start is inside the trust region and the AGC decays, enriching if not
        attempt = 0
        while True:
            est0 = estimate(state.rom, state.q_r)
            kind = None
            if est0.R > state.eta:
                kind = "not-in-tr"
            else:
                q_agc, t_agc, est_agc = compute_agc(state, state.q_r, est0)
                if q_agc is None or not est_agc.J_r < state.evaluation.J:
                    kind = "agc-decay"
            if kind is None:
                break
            attempt += 1
            state.bases = enrich_on_failure(problem, state.bases, kind, state.q, state.evaluation, attempt)
            state.rebuild()
            failures.append((kind, state.bases.eps_trace[-1]))
        n_q_before, n_v_before = state.bases.n_q, state.bases.n_v
        used = [(est_agc.R, state.eta)]
        alphas = []
        if s.beta1 * state.eta <= est_agc.R:
            q_trial, est_trial, is_agc = q_agc, est_agc, True
        else:
            q_trial, est_trial, alphas, inner_used, _ = inner_solve(state, q_agc, est_agc, state.alpha_chain)
            used += inner_used
            is_agc = not inner_used
        solves_before = problem.fom_solves
        branch, accepted, u_trial = accept_or_reject(state, q_trial, est_trial, est_agc, is_agc)
        decision_solves = problem.fom_solves - solves_before
        eta_before = state.eta
        rho = float("nan")
        if accepted:
            rejects = 0
            outer += 1
            J_r_old = est0.J_r
            J_h_old = state.evaluation.J
            q_new = problem.project_box(state.rom.lift(q_trial))
            ev_new = problem.evaluate(q_new, obs, u=u_trial)
            state.bases = enrich_after_acceptance(problem, state.bases, q_new, ev_new)
            state.q = q_new
            state.evaluation = ev_new
            state.rebuild()
            J_r_new = state.rom.objective_r(state.q_r)
            denom = J_r_old - J_r_new
            rho = (J_h_old - ev_new.J) / denom if denom != 0 else float("inf")
            if branch == "agc":
                state.eta = s.beta3 * state.eta
            elif rho > s.beta2:
                state.eta = state.eta / s.beta3
            if len(alphas) >= 2:
                state.alpha_chain = alphas[1]
            elif alphas:
                state.alpha_chain = alphas[-1]
            iterates.append(q_new.copy())
        else:
            rejects += 1
            state.eta = s.beta3 * state.eta
            if rejects >= s.max_rejects:
                raise StagnationError(
                    f"trial step rejected {rejects} consecutive times at outer iteration {outer + 1}",
                    {"eta": state.eta, "n_q": state.bases.n_q, "n_v": state.bases.n_v,
                     "J_h": state.evaluation.J, "branch": branch},
                )
        dec = DecisionRecord(outer if accepted else outer + 1, branch, accepted, eta_before, state.eta,
                             n_q_before, n_v_before, state.bases.n_q, state.bases.n_v, decision_solves,
                             est_trial.R, est_trial.J_r, est_trial.delta_J, est_agc.J_r, rho, used, alphas,
                             failures)
        decisions.append(dec)
        rec = TrRecord(dec.iteration, state.evaluation.J, alphas[-1] if alphas else float("nan"), len(alphas),
                       problem.fom_solves, time.perf_counter() - t0, state.eta, state.bases.n_q,
                       state.bases.n_v, branch, est_trial.delta_J)
        history.append(rec)
        if callback is not None:
            callback(rec)
    return TrResult(state.q, state.evaluation.J, state.evaluation.J <= level, reason, history, decisions,
                    iterates, state.bases)

"""Full-order iteratively regularised Gauss-Newton method with the discrepancy principle."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError
from .subproblem import FomLinearization, PgdSettings, regulate_alpha

__all__ = ["IrgnmSettings", "IterationRecord", "IrgnmResult", "run_fom_irgnm", "discrepancy_level"]


def discrepancy_level(tau: float, delta: float) -> float:
    """Threshold ``(tau delta)^2 / 2`` on the objective."""
    return 0.5 * (tau * delta) ** 2


@dataclass
class IrgnmSettings:
    delta: float = 1e-5
    tau: float = 3.5
    theta: float = 0.4
    Theta: float = 1.95
    alpha0: float = 1e-5
    max_iterations: int = 100
    pgd: PgdSettings = field(default_factory=PgdSettings)

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError("tau must exceed 1")
        if not 0 < self.theta < self.Theta < 2:
            raise ValueError("need 0 < theta < Theta < 2")
        if not self.alpha0 > 0 or self.delta < 0:
            raise ValueError("alpha0 must be positive and delta non-negative")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    alpha: float
    inner_iterations: int
    fom_solves: int
    wall_time: float
    ratio: float = float("nan")
    alpha_trials: int = 0


@dataclass
class IrgnmResult:
    q: np.ndarray
    J: float
    converged: bool
    stop_reason: str
    history: list
    iterates: list
    steps: list  # accepted (d, alpha) pairs, for re-evaluation

    @property
    def iterations(self) -> int:
        return len(self.history) - 1


def run_fom_irgnm(problem, obs, settings: IrgnmSettings | None = None, q0=None, q_circ=None,
                  callback=None) -> IrgnmResult:
    """Outer Gauss-Newton loop on the full-order model.

    Each step solves the linearised Tikhonov problem with ``alpha`` chosen so
    that ``theta J <= 2 J~ <= Theta J``; the next search starts from the last
    accepted ``alpha``.
    """
    s = settings or IrgnmSettings()
    q = problem.constant_parameter() if q0 is None else problem._as_parameter(q0).copy()
    if not problem.is_admissible(q):
        raise ValueError("initial parameter is not admissible")
    q_circ = q.copy() if q_circ is None else problem._as_parameter(q_circ)
    level = discrepancy_level(s.tau, s.delta)
    t0 = time.perf_counter()
    ev = problem.evaluate(q, obs)
    history = [IterationRecord(0, ev.J, float("nan"), 0, problem.fom_solves, time.perf_counter() - t0)]
    iterates = [q.copy()]
    steps = []
    alpha = s.alpha0
    reason = "discrepancy"
    while ev.J > level:
        if len(history) > s.max_iterations:
            reason = "max-iterations"
            break
        lin = FomLinearization(problem, q, obs, ev)
        res = regulate_alpha(lin, q_circ, alpha, s.theta, s.Theta, s.pgd)
        alpha = res.alpha
        q = problem.project_box(q + res.d)
        ev = problem.evaluate(q, obs)
        if not np.isfinite(ev.J):
            raise SolverError("non-finite objective")
        inner = sum(t[2] for t in res.trace)
        rec = IterationRecord(len(history), ev.J, alpha, inner, problem.fom_solves,
                              time.perf_counter() - t0, res.ratio, len(res.trace))
        history.append(rec)
        iterates.append(q.copy())
        steps.append((res.d, alpha))
        if callback is not None:
            callback(rec)
    return IrgnmResult(q, ev.J, ev.J <= level, reason, history, iterates, steps)
